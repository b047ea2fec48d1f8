#pragma once

// Image file import/export for the CLI. Binary PPM (P6) and PGM (P5) are
// decoded natively; building with CMTMAE_HAVE_OPENCV adds PNG/JPEG via
// cv::imread in the directory converter.

#include <cstdint>
#include <string>
#include <vector>

#include "cmtmae/data_io.hpp"
#include "cmtmae/errors.hpp"

#ifdef CMTMAE_HAVE_OPENCV
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#endif

namespace cmtmae {

struct RawImage {
    uint32_t channels = 0, height = 0, width = 0;
    std::vector<uint8_t> chw;
};

namespace io_detail {

inline int next_pnm_int(Reader& r) {
    // Skips whitespace and '#' comments.
    for (;;) {
        r.need(1);
        const char c = static_cast<char>(r.p[r.pos]);
        if (c == '#') {
            while (r.pos < r.n && r.p[r.pos] != '\n') ++r.pos;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++r.pos;
        } else {
            break;
        }
    }
    int v = 0;
    bool any = false;
    while (r.pos < r.n && r.p[r.pos] >= '0' && r.p[r.pos] <= '9') {
        v = v * 10 + (r.p[r.pos] - '0');
        ++r.pos;
        any = true;
    }
    if (!any) throw DataError(r.context + ": malformed PNM header");
    return v;
}

}  // namespace io_detail

inline RawImage load_pnm(const std::string& path) {
    const std::string data = io_detail::read_file(path);
    io_detail::Reader r(data, "image '" + path + "'");
    const std::string magic = r.str(2);
    if (magic != "P6" && magic != "P5")
        throw DataError("'" + path + "': unsupported image format (want binary PPM/PGM)");
    const int channels = magic == "P6" ? 3 : 1;
    const int width = io_detail::next_pnm_int(r);
    const int height = io_detail::next_pnm_int(r);
    const int maxval = io_detail::next_pnm_int(r);
    if (width <= 0 || height <= 0 || maxval != 255)
        throw DataError("'" + path + "': unsupported PNM header (need maxval 255)");
    ++r.pos;  // single whitespace after maxval

    RawImage img;
    img.channels = static_cast<uint32_t>(channels);
    img.height = static_cast<uint32_t>(height);
    img.width = static_cast<uint32_t>(width);
    const size_t plane = static_cast<size_t>(height) * width;
    r.need(plane * channels);
    img.chw.resize(plane * channels);
    // PNM stores interleaved; convert to planar CHW.
    for (size_t k = 0; k < plane; ++k)
        for (int c = 0; c < channels; ++c)
            img.chw[static_cast<size_t>(c) * plane + k] = r.p[r.pos + k * channels + c];
    return img;
}

inline void save_ppm(const std::string& path, uint32_t height, uint32_t width,
                     const std::vector<uint8_t>& chw_rgb) {
    const size_t plane = static_cast<size_t>(height) * width;
    if (chw_rgb.size() != plane * 3) throw ContractError("save_ppm: need 3*H*W bytes");
    io_detail::Writer w;
    w.str("P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n");
    for (size_t k = 0; k < plane; ++k)
        for (int c = 0; c < 3; ++c) w.u8(chw_rgb[c * plane + k]);
    io_detail::write_file_atomic(path, w.buf);
}

inline void save_pgm(const std::string& path, uint32_t height, uint32_t width,
                     const std::vector<uint8_t>& gray) {
    if (gray.size() != static_cast<size_t>(height) * width)
        throw ContractError("save_pgm: need H*W bytes");
    io_detail::Writer w;
    w.str("P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n");
    w.bytes(gray.data(), gray.size());
    io_detail::write_file_atomic(path, w.buf);
}

// Loads any supported image file. PNM always works; other extensions need
// the OpenCV build.
inline RawImage load_image_file(const std::string& path) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    if (ext == "ppm" || ext == "pgm" || ext == "pnm") return load_pnm(path);
#ifdef CMTMAE_HAVE_OPENCV
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) throw DataError("'" + path + "': cannot decode image");
    cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
    RawImage img;
    img.channels = 3;
    img.height = static_cast<uint32_t>(m.rows);
    img.width = static_cast<uint32_t>(m.cols);
    const size_t plane = static_cast<size_t>(m.rows) * m.cols;
    img.chw.resize(plane * 3);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            const cv::Vec3b px = m.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c)
                img.chw[c * plane + static_cast<size_t>(y) * m.cols + x] = px[c];
        }
    return img;
#else
    throw DataError("'" + path + "': only PPM/PGM supported in this build");
#endif
}

}  // namespace cmtmae

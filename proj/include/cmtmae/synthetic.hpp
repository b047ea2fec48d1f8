#pragma once

// Synthetic structured dataset: each class fixes the period of a stripe
// texture on a geometric ladder (fine through coarse), rendered at a fixed
// off-axis orientation with random phase inside a jittered circular window
// over a noise grain whose strength varies per image. The label is carried
// by texture scale, which is uniform across the image, while phase, window
// placement, contrast and grain strength are nuisances. An optional smooth shading ramp keyed to the class can be added
// on top; it is odd around the image center, so per-channel means stay
// class-independent either way and the label stays invisible to mean color.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "cmtmae/data_io.hpp"
#include "cmtmae/errors.hpp"
#include "cmtmae/rng.hpp"

namespace cmtmae {

struct SyntheticSpec {
    uint64_t count = 512;
    int classes = 8;   // 2..8; class c picks rung c of the stripe-period ladder
    int size = 32;
    uint64_t seed = 0;
    double noise = 0.12;  // upper bound of the per-image noise stddev
    double ramp = 0.12;   // shading ramp amplitude

    void validate() const {
        if (count == 0) throw ConfigError("synthetic: count must be positive");
        if (classes < 2 || classes > 8) throw ConfigError("synthetic: classes must be in [2,8]");
        if (size < 8) throw ConfigError("synthetic: size must be at least 8");
        if (noise < 0.0 || noise > 0.5) throw ConfigError("synthetic: noise must be in [0,0.5]");
        if (ramp < 0.0 || ramp > 0.3) throw ConfigError("synthetic: ramp must be in [0,0.3]");
    }
};

inline std::pair<ImageDataset, std::vector<uint16_t>> make_synthetic_dataset(const SyntheticSpec& spec) {
    spec.validate();
    const int s = spec.size;
    ImageDataset ds;
    ds.channels = 3;
    ds.height = static_cast<uint32_t>(s);
    ds.width = static_cast<uint32_t>(s);
    ds.pixels.resize(spec.count * ds.image_bytes());
    std::vector<uint16_t> labels(spec.count);

    const double pi = 3.14159265358979323846;
    const size_t plane = static_cast<size_t>(s) * s;

    for (uint64_t i = 0; i < spec.count; ++i) {
        Rng rng(derive_seed(spec.seed, rng_purpose::synth, i));
        const int label = static_cast<int>(i % spec.classes);
        labels[i] = static_cast<uint16_t>(label);

        // Adjacent rungs differ by a fixed ratio ((20/4.5)^(1/7) ~ 1.24 at
        // eight classes), so every class pair is separated on a log scale.
        const double period = 4.5 * std::pow(20.0 / 4.5, label / (spec.classes - 1.0));
        // Fixed off-axis orientation: avoids lattice-aligned degeneracies and
        // keeps texture statistics comparable across classes, so the period
        // ladder is the only class-dependent factor.
        const double theta = pi / 5.0;
        // One ramp direction per class, spread over the full circle.
        const double ramp_dir = label * (2.0 * pi / spec.classes);
        const double phase = rng.next_double() * 2.0 * pi;
        const double cx = s / 2.0 + (rng.next_double() - 0.5) * 0.4 * s;
        const double cy = s / 2.0 + (rng.next_double() - 0.5) * 0.4 * s;
        const double radius = s * (0.30 + 0.12 * rng.next_double());
        const double amp = 0.30 + 0.15 * rng.next_double();
        // Noise grain with a per-image amplitude: local energy statistics are
        // dominated by a class-independent nuisance, so reading the class
        // requires separating the stripe structure from the grain.
        const double grain = spec.noise * (0.1 + 0.9 * rng.next_double());
        // Per-image channel offsets, identically distributed for every class.
        double off[3];
        for (double& o : off) o = (rng.next_double() - 0.5) * 0.1;

        const double ux = std::cos(theta), uy = std::sin(theta);
        const double rx = std::cos(ramp_dir), ry = std::sin(ramp_dir);
        const double mid = (s - 1) / 2.0;  // lattice center: ramp sums to zero exactly
        uint8_t* img = ds.pixels.data() + i * ds.image_bytes();
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double dx = x - cx, dy = y - cy;
                double base = 0.5 + spec.ramp * ((x - mid) * rx + (y - mid) * ry) / mid;
                if (dx * dx + dy * dy <= radius * radius) {
                    const double t = (x * ux + y * uy) * (2.0 * pi / period) + phase;
                    // Square-wave profile: edges put local gradient energy at
                    // every rung of the ladder, so coarse classes are still
                    // distinguishable at patch scale.
                    base += amp * (std::sin(t) >= 0.0 ? 1.0 : -1.0);
                }
                for (int c = 0; c < 3; ++c) {
                    double v = base + off[c] + rng.next_normal() * grain;
                    v = std::min(1.0, std::max(0.0, v));
                    img[c * plane + static_cast<size_t>(y) * s + x] =
                        static_cast<uint8_t>(std::lround(v * 255.0));
                }
            }
    }
    ds.finalize();
    return {std::move(ds), std::move(labels)};
}

}  // namespace cmtmae

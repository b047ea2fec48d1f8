#pragma once

// Command-line surface. Subcommands:
//
//   pretrain      two-stage pretraining (or vanilla pixel MAE) on a CMTD file
//   probe         linear-probe evaluation of a checkpoint
//   make-dataset  synthesize a labeled dataset, or import PPM/PGM images
//   visualize     attention heatmaps and the mask for one image
//   inspect       describe a CMTD/CMTL/CMTC file
//
// Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 numeric
// failures, 1 anything else.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdarg>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "cmtmae/data_io.hpp"
#include "cmtmae/errors.hpp"
#include "cmtmae/image_files.hpp"
#include "cmtmae/probe.hpp"
#include "cmtmae/synthetic.hpp"
#include "cmtmae/trainer.hpp"
#include "cmtmae/visualize.hpp"

namespace cmtmae {

namespace cli_detail {

inline std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

inline EncoderParams load_encoder(const Checkpoint& ckpt, const std::string& prefix,
                                  const ViTConfig& cfg) {
    Rng dummy(0);
    EncoderParams p = init_encoder_params(cfg, dummy, /*trainable=*/false);
    for_each_param(p, prefix, [&](const std::string& name, Tensor& dst) {
        const NamedTensorEntry* e = ckpt.find(name);
        if (!e) throw DataError("checkpoint: missing tensor '" + name + "'");
        if (e->shape != dst.shape())
            throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_str(e->shape) +
                            ", expected " + shape_str(dst.shape()));
        dst.values_mut() = e->values;
    });
    return p;
}

struct PretrainArgs {
    std::string config_path, data_path, teacher_path, resume_path, out_path, metrics_path;
    std::vector<std::string> sets;
    int64_t save_every = 0;
    int64_t log_every = 50;
    bool quiet = false;
};

inline TrainConfig build_config(const std::string& config_path,
                                const std::vector<std::string>& sets) {
    TrainConfig cfg;
    if (!config_path.empty())
        apply_config_text(cfg, io_detail::read_file(config_path), config_path);
    for (const std::string& s : sets) {
        const size_t eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        apply_config_kv(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    return cfg;
}

inline int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
    TrainConfig cfg = build_config(a.config_path, a.sets);
    const ImageDataset data = load_dataset(a.data_path);

    std::optional<Trainer> trainer;
    if (!a.resume_path.empty()) {
        if (!a.teacher_path.empty())
            throw ConfigError("--resume restores the teacher from the checkpoint; drop --teacher");
        trainer.emplace(Trainer::resume(load_checkpoint(a.resume_path), cfg, data));
    } else if (cfg.objective == "cmt") {
        if (a.teacher_path.empty())
            throw ConfigError("objective=cmt requires --teacher (a pixel-objective checkpoint)");
        trainer.emplace(cfg, data, load_teacher(load_checkpoint(a.teacher_path)));
    } else {
        trainer.emplace(cfg, data, std::nullopt);
    }

    MetricsWriter metrics;
    if (!a.metrics_path.empty()) metrics = MetricsWriter(a.metrics_path);

    if (!a.quiet) {
        out << fmt("training: %" PRId64 " steps (%" PRId64 " stage-1), %" PRIu64 " images\n",
                   trainer->total_steps(), trainer->stage1_steps(), data.count());
        out << fmt("model: %" PRId64 " encoder + %" PRId64 " decoder parameters\n",
                   count_params(trainer->student()), count_params(trainer->decoder()));
    }

    while (!trainer->finished()) {
        const StepMetrics m = trainer->step();
        metrics.write(m);
        const bool last = trainer->finished();
        if (!a.quiet && (m.step % a.log_every == 0 || last))
            out << fmt("step %" PRId64 "/%" PRId64 " stage %d loss %.6f lr %.3e\n", m.step,
                       trainer->total_steps(), m.stage, m.loss_total, m.lr);
        if (a.save_every > 0 && !last && (m.step + 1) % a.save_every == 0)
            trainer->save(a.out_path);
    }
    trainer->save(a.out_path);
    if (!a.quiet) out << "saved checkpoint: " << a.out_path << "\n";
    return 0;
}

struct ProbeArgs {
    std::string data_path, labels_path, checkpoint_path;
    ProbeConfig cfg;
};

inline int cmd_probe(const ProbeArgs& a, std::ostream& out) {
    const ImageDataset data = load_dataset(a.data_path);
    const std::vector<uint16_t> labels = load_labels(a.labels_path);
    if (labels.size() != data.count())
        throw DataError(fmt("%zu labels for %" PRIu64 " images", labels.size(), data.count()));
    const Checkpoint ckpt = load_checkpoint(a.checkpoint_path);
    const TeacherModel enc = load_teacher(ckpt);  // student weights, frozen
    const ProbeResult res = probe_encoder(data, labels, enc.params, enc.cfg, a.cfg);
    out << fmt("classes %d  train %" PRId64 "  eval %" PRId64 "\n", res.classes, res.train_count,
               res.eval_count);
    out << fmt("train_accuracy %.4f\n", res.train_accuracy);
    out << fmt("eval_accuracy %.4f\n", res.eval_accuracy);
    out << fmt("train_loss %.6f\n", res.final_train_loss);
    return 0;
}

struct MakeDatasetArgs {
    std::string out_path, labels_out, import_list;
    SyntheticSpec spec;
};

inline int cmd_make_dataset(const MakeDatasetArgs& a, std::ostream& out) {
    ImageDataset ds;
    std::vector<uint16_t> labels;
    if (!a.import_list.empty()) {
        // Each line: <path> <label>. All images must share dimensions.
        const std::string text = io_detail::read_file(a.import_list);
        size_t pos = 0, line_no = 0;
        while (pos < text.size()) {
            size_t end = text.find('\n', pos);
            if (end == std::string::npos) end = text.size();
            std::string line = text.substr(pos, end - pos);
            pos = end + 1;
            ++line_no;
            while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
            if (line.empty()) continue;
            const size_t sp = line.find_last_of(" \t");
            if (sp == std::string::npos)
                throw DataError(a.import_list + ":" + std::to_string(line_no) +
                                ": expected '<path> <label>'");
            const std::string path = line.substr(0, sp);
            const int label = static_cast<int>(cfg_detail::parse_int("label", line.substr(sp + 1)));
            if (label < 0 || label > 65535)
                throw DataError(a.import_list + ":" + std::to_string(line_no) + ": label out of range");
            const RawImage img = load_image_file(path);
            if (ds.pixels.empty()) {
                ds.channels = img.channels;
                ds.height = img.height;
                ds.width = img.width;
            } else if (img.channels != ds.channels || img.height != ds.height ||
                       img.width != ds.width) {
                throw DataError("'" + path + "': " + std::to_string(img.channels) + "x" +
                                std::to_string(img.height) + "x" + std::to_string(img.width) +
                                " does not match first image " + std::to_string(ds.channels) + "x" +
                                std::to_string(ds.height) + "x" + std::to_string(ds.width));
            }
            ds.pixels.insert(ds.pixels.end(), img.chw.begin(), img.chw.end());
            labels.push_back(static_cast<uint16_t>(label));
        }
        if (ds.pixels.empty()) throw DataError(a.import_list + ": no images listed");
        ds.finalize();
    } else {
        auto made = make_synthetic_dataset(a.spec);
        ds = std::move(made.first);
        labels = std::move(made.second);
    }
    save_dataset(a.out_path, ds);
    save_labels(a.labels_out, labels);
    out << fmt("wrote %" PRIu64 " images (%ux%ux%u) to %s\n", ds.count(), ds.channels, ds.height,
               ds.width, a.out_path.c_str());
    out << "wrote labels to " << a.labels_out << "\n";
    return 0;
}

struct VisualizeArgs {
    std::string checkpoint_path, data_path, prefix;
    int64_t index = 0;
};

inline int cmd_visualize(const VisualizeArgs& a, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint_path);
    TrainConfig cfg;
    apply_config_text(cfg, ckpt.config_text, "checkpoint config");
    const ImageDataset data = load_dataset(a.data_path);
    if (a.index < 0 || static_cast<uint64_t>(a.index) >= data.count())
        throw DataError(fmt("index %" PRId64 " out of range for %" PRIu64 " images", a.index,
                            data.count()));
    if (static_cast<int>(data.height) != cfg.model.image_size ||
        static_cast<int>(data.channels) != cfg.model.channels)
        throw DataError("dataset geometry does not match the checkpoint's model");

    const std::vector<double> raw = data.image_raw(static_cast<uint64_t>(a.index));
    const Tensor patches =
        patchify(data.image_standardized(static_cast<uint64_t>(a.index)), cfg.model);

    // The online map is what training would mask with: the momentum shadow in
    // stage 2, the student before that.
    const std::string online_ns = ckpt.has_momentum ? "momentum." : "student.";
    const EncoderParams online = load_encoder(ckpt, online_ns, cfg.model);
    const AttentionMap online_map =
        extract_attention(encode(patches, MaskSet{}, online, cfg.model), cfg.attn_map_mode);

    std::vector<std::string> written;
    auto emit = [&](const std::string& suffix, auto&& writer) {
        const std::string path = a.prefix + suffix;
        writer(path);
        written.push_back(path);
    };

    emit("_student.ppm", [&](const std::string& p) {
        write_attention_heatmap(p, raw, online_map, cfg.model);
    });

    AttentionMap mask_map = online_map;
    if (ckpt.find("teacher.cls_token")) {
        ViTConfig tcfg = cfg.model;
        tcfg.embed_dim = cfg.model.teacher_dim;
        tcfg.depth = cfg.teacher_depth;
        tcfg.heads = cfg.teacher_heads;
        tcfg.mlp_ratio = cfg.teacher_mlp_ratio;
        const EncoderParams teacher = load_encoder(ckpt, "teacher.", tcfg);
        const AttentionMap teacher_map =
            extract_attention(encode(patches, MaskSet{}, teacher, tcfg), cfg.attn_map_mode);
        mask_map = aggregate_attention(online_map, teacher_map, cfg.alpha);
        emit("_teacher.ppm", [&](const std::string& p) {
            write_attention_heatmap(p, raw, teacher_map, cfg.model);
        });
        emit("_combined.ppm", [&](const std::string& p) {
            write_attention_heatmap(p, raw, mask_map, cfg.model);
        });
    }

    const MaskSet mask =
        select_mask_topk(mask_map, cfg.mask_ratio, parse_mask_polarity(cfg.mask_polarity));
    emit("_mask.ppm",
         [&](const std::string& p) { write_mask_overlay(p, raw, mask, cfg.model); });
    emit("_grid.pgm",
         [&](const std::string& p) { write_attention_pgm(p, mask_map, cfg.model); });

    for (const std::string& p : written) out << "wrote " << p << "\n";
    return 0;
}

inline int cmd_inspect(const std::string& path, std::ostream& out) {
    const std::string head = io_detail::read_file(path).substr(0, 4);
    if (head == "CMTD") {
        const ImageDataset ds = load_dataset(path);
        out << fmt("CMTD dataset: %" PRIu64 " images, %ux%ux%u (channels x height x width)\n",
                   ds.count(), ds.channels, ds.height, ds.width);
        for (size_t c = 0; c < ds.channel_mean.size(); ++c)
            out << fmt("channel %zu: mean %.4f std %.4f\n", c, ds.channel_mean[c],
                       ds.channel_std[c]);
        return 0;
    }
    if (head == "CMTL") {
        const std::vector<uint16_t> labels = load_labels(path);
        int classes = 0;
        for (uint16_t l : labels) classes = std::max(classes, static_cast<int>(l) + 1);
        std::vector<int64_t> hist(static_cast<size_t>(classes), 0);
        for (uint16_t l : labels) ++hist[l];
        out << fmt("CMTL labels: %zu entries, %d classes\n", labels.size(), classes);
        for (int c = 0; c < classes && c < 16; ++c)
            out << fmt("class %d: %" PRId64 "\n", c, hist[static_cast<size_t>(c)]);
        if (classes > 16) out << "...\n";
        return 0;
    }
    if (head == "CMTC") {
        const Checkpoint c = load_checkpoint(path);
        int64_t values = 0;
        for (const auto& t : c.tensors) values += static_cast<int64_t>(t.values.size());
        out << fmt("CMTC checkpoint: step %" PRIu64 ", stage %u, epoch %" PRIu64
                   ", optimizer steps %" PRIu64 "\n",
                   c.step, c.stage, c.epoch, c.opt_steps);
        out << fmt("seed %" PRIu64 ", momentum %s\n", c.master_seed, c.has_momentum ? "yes" : "no");
        out << fmt("%zu tensors, %" PRId64 " values\n", c.tensors.size(), values);
        const bool ok = fnv1a64(c.config_text) == c.config_hash;
        out << fmt("config hash %016" PRIx64 " (%s)\n", c.config_hash,
                   ok ? "consistent" : "MISMATCH");
        out << "config:\n";
        size_t pos = 0;
        while (pos < c.config_text.size()) {
            size_t end = c.config_text.find('\n', pos);
            if (end == std::string::npos) end = c.config_text.size();
            out << "  " << c.config_text.substr(pos, end - pos) << "\n";
            pos = end + 1;
        }
        return 0;
    }
    throw DataError("'" + path + "': not a CMTD/CMTL/CMTC file");
}

}  // namespace cli_detail

// Args in natural order, program name excluded.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"collaborative masked autoencoder pretraining"};
    app.name("cmtmae");
    app.require_subcommand(1);

    PretrainArgs pa;
    CLI::App* pre = app.add_subcommand("pretrain", "run pretraining");
    pre->add_option("--config", pa.config_path, "key=value config file");
    pre->add_option("--set", pa.sets, "override one config key (key=value, repeatable)");
    pre->add_option("--data", pa.data_path, "CMTD dataset")->required();
    pre->add_option("--teacher", pa.teacher_path, "teacher checkpoint (objective=cmt)");
    pre->add_option("--resume", pa.resume_path, "checkpoint to resume from");
    pre->add_option("--out", pa.out_path, "checkpoint output path")->required();
    pre->add_option("--metrics", pa.metrics_path, "JSONL metrics output (appended)");
    pre->add_option("--save-every", pa.save_every, "also save every N steps");
    pre->add_option("--log-every", pa.log_every, "print every N steps");
    pre->add_flag("--quiet", pa.quiet, "suppress progress output");

    ProbeArgs pr;
    CLI::App* prb = app.add_subcommand("probe", "linear-probe a checkpoint");
    prb->add_option("--data", pr.data_path, "CMTD dataset")->required();
    prb->add_option("--labels", pr.labels_path, "CMTL labels")->required();
    prb->add_option("--checkpoint", pr.checkpoint_path, "CMTC checkpoint")->required();
    prb->add_option("--epochs", pr.cfg.epochs, "probe training epochs");
    prb->add_option("--batch-size", pr.cfg.batch_size, "probe batch size");
    prb->add_option("--lr", pr.cfg.lr, "probe learning rate");
    prb->add_option("--train-fraction", pr.cfg.train_fraction, "train split fraction");
    prb->add_option("--seed", pr.cfg.seed, "probe seed (split and order)");

    MakeDatasetArgs md;
    CLI::App* mk = app.add_subcommand("make-dataset", "synthesize or import a dataset");
    mk->add_option("--out", md.out_path, "CMTD output path")->required();
    mk->add_option("--labels-out", md.labels_out, "CMTL output path")->required();
    mk->add_option("--import-list", md.import_list, "file of '<image path> <label>' lines");
    mk->add_option("--count", md.spec.count, "synthetic: number of images");
    mk->add_option("--classes", md.spec.classes, "synthetic: number of classes");
    mk->add_option("--size", md.spec.size, "synthetic: image side length");
    mk->add_option("--seed", md.spec.seed, "synthetic: generator seed");
    mk->add_option("--noise", md.spec.noise, "synthetic: max per-image noise stddev");
    mk->add_option("--ramp", md.spec.ramp, "synthetic: shading ramp amplitude");

    VisualizeArgs vz;
    CLI::App* vis = app.add_subcommand("visualize", "attention and mask renderings");
    vis->add_option("--checkpoint", vz.checkpoint_path, "CMTC checkpoint")->required();
    vis->add_option("--data", vz.data_path, "CMTD dataset")->required();
    vis->add_option("--index", vz.index, "image index");
    vis->add_option("--out-prefix", vz.prefix, "output path prefix")->required();

    std::string inspect_path;
    CLI::App* ins = app.add_subcommand("inspect", "describe a CMTD/CMTL/CMTC file");
    ins->add_option("file", inspect_path, "file to describe")->required();

    std::reverse(args.begin(), args.end());  // CLI11's vector overload wants reversed args
    try {
        app.parse(std::move(args));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (pre->parsed()) return cmd_pretrain(pa, out);
        if (prb->parsed()) return cmd_probe(pr, out);
        if (mk->parsed()) return cmd_make_dataset(md, out);
        if (vis->parsed()) return cmd_visualize(vz, out);
        if (ins->parsed()) return cmd_inspect(inspect_path, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;  // unreachable with require_subcommand(1)
}

inline int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(std::move(args));
}

}  // namespace cmtmae

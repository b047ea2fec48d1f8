#pragma once

// Two-stage pretraining driver.
//
//   stage 1: teacher attention chooses the mask; the decoder reconstructs
//            teacher features at masked positions.
//   stage 2: student (momentum) and teacher attention are aggregated into a
//            collaborative mask; the decoder reconstructs both feature sets,
//            alpha-weighted. The momentum shadow starts at the stage boundary
//            as a copy of the student and tracks it by EMA.
//
// objective=pixel trains a vanilla masked autoencoder (random mask, pixel
// reconstruction) in a single stage; it exists to produce teacher weights
// from scratch.
//
// Every stochastic choice draws from a stream derived from (seed, purpose,
// step, slot), so a run is a pure function of its config and checkpoint
// resume can replay the remaining steps exactly.

#include <array>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <optional>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "cmtmae/data_io.hpp"
#include "cmtmae/errors.hpp"
#include "cmtmae/masking.hpp"
#include "cmtmae/momentum.hpp"
#include "cmtmae/objectives.hpp"
#include "cmtmae/optimizer.hpp"
#include "cmtmae/rng.hpp"
#include "cmtmae/tensor.hpp"
#include "cmtmae/vit.hpp"

namespace cmtmae {

// ---- config ----

struct TrainConfig {
    ViTConfig model;
    // Teacher encoder architecture, recorded so a checkpoint alone can
    // rebuild the teacher. Overwritten from the teacher checkpoint at
    // trainer construction; inert for objective=pixel.
    int teacher_depth = 4;
    int teacher_heads = 4;
    double teacher_mlp_ratio = 4.0;
    std::string objective = "cmt";  // cmt | pixel
    double mask_ratio = 0.75;
    double alpha = 0.3;
    double ema_m = 0.999;
    double lr = 1.5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    int64_t warmup_steps = 50;
    int64_t total_epochs = 16;
    double stage1_fraction = 0.5;
    int batch_size = 8;
    uint64_t seed = 0;
    std::string mask_polarity = "most";
    std::string selection_mode = "topk";
    std::string attn_map_mode = "cls_mean";
    bool augment = false;
    bool teacher_cache = true;
    bool ema_additive_debug = false;  // unstable additive EMA, debug only

    void validate() const {
        model.validate();
        if (objective != "cmt" && objective != "pixel")
            throw ConfigError("objective must be 'cmt' or 'pixel', got '" + objective + "'");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
            throw ConfigError("mask_ratio must lie in (0,1)");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0,1]");
        if (!(ema_m >= 0.0 && ema_m <= 1.0)) throw ConfigError("ema_m must lie in [0,1]");
        if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("betas must lie in [0,1)");
        if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
        if (total_epochs < 1) throw ConfigError("total_epochs must be positive");
        if (!(stage1_fraction >= 0.0 && stage1_fraction <= 1.0))
            throw ConfigError("stage1_fraction must lie in [0,1]");
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (teacher_depth < 1 || teacher_depth > 256)
            throw ConfigError("teacher_depth must lie in [1,256]");
        if (teacher_heads < 1 || teacher_heads > 256)
            throw ConfigError("teacher_heads must lie in [1,256]");
        if (!(teacher_mlp_ratio > 0.0)) throw ConfigError("teacher_mlp_ratio must be positive");
        const MaskPolarity pol = parse_mask_polarity(mask_polarity);
        const SelectionMode mode = parse_selection_mode(selection_mode);
        if (mode == SelectionMode::stochastic && pol != MaskPolarity::most_attended)
            throw ConfigError("selection_mode=stochastic supports mask_polarity=most only");
        if (attn_map_mode != "cls_mean" && attn_map_mode != "cls_max" && attn_map_mode != "rows_mean")
            throw ConfigError("attn_map_mode must be cls_mean, cls_max or rows_mean");
    }
};

namespace cfg_detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as number");
    }
}

inline int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const long long d = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as integer");
    }
}

inline uint64_t parse_uint(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const unsigned long long d = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as integer");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as bool");
}

}  // namespace cfg_detail

// Applies one key=value setting. Unknown keys are config errors; the key list
// is the config-file and CLI-flag surface.
inline void apply_config_kv(TrainConfig& c, const std::string& key, const std::string& value) {
    using namespace cfg_detail;
    auto as_int = [&](int64_t lo, int64_t hi) {
        const int64_t v = parse_int(key, value);
        if (v < lo || v > hi)
            throw ConfigError("config key '" + key + "': " + value + " outside [" +
                              std::to_string(lo) + "," + std::to_string(hi) + "]");
        return v;
    };
    if (key == "image_size") c.model.image_size = static_cast<int>(as_int(1, 1 << 16));
    else if (key == "channels") c.model.channels = static_cast<int>(as_int(1, 16));
    else if (key == "patch_size") c.model.patch_size = static_cast<int>(as_int(1, 1 << 12));
    else if (key == "embed_dim") c.model.embed_dim = static_cast<int>(as_int(1, 1 << 14));
    else if (key == "depth") c.model.depth = static_cast<int>(as_int(0, 256));
    else if (key == "heads") c.model.heads = static_cast<int>(as_int(1, 256));
    else if (key == "decoder_dim") c.model.decoder_dim = static_cast<int>(as_int(1, 1 << 14));
    else if (key == "decoder_depth") c.model.decoder_depth = static_cast<int>(as_int(0, 256));
    else if (key == "decoder_heads") c.model.decoder_heads = static_cast<int>(as_int(1, 256));
    else if (key == "mlp_ratio") c.model.mlp_ratio = parse_double(key, value);
    else if (key == "teacher_dim") c.model.teacher_dim = static_cast<int>(as_int(1, 1 << 14));
    else if (key == "teacher_depth") c.teacher_depth = static_cast<int>(as_int(1, 256));
    else if (key == "teacher_heads") c.teacher_heads = static_cast<int>(as_int(1, 256));
    else if (key == "teacher_mlp_ratio") c.teacher_mlp_ratio = parse_double(key, value);
    else if (key == "objective") c.objective = value;
    else if (key == "mask_ratio") c.mask_ratio = parse_double(key, value);
    else if (key == "alpha") c.alpha = parse_double(key, value);
    else if (key == "ema_m") c.ema_m = parse_double(key, value);
    else if (key == "lr") c.lr = parse_double(key, value);
    else if (key == "weight_decay") c.weight_decay = parse_double(key, value);
    else if (key == "beta1") c.beta1 = parse_double(key, value);
    else if (key == "beta2") c.beta2 = parse_double(key, value);
    else if (key == "warmup_steps") c.warmup_steps = as_int(0, 1ll << 40);
    else if (key == "total_epochs") c.total_epochs = as_int(1, 1ll << 40);
    else if (key == "stage1_fraction") c.stage1_fraction = parse_double(key, value);
    else if (key == "batch_size") c.batch_size = static_cast<int>(as_int(1, 1 << 20));
    else if (key == "seed") c.seed = parse_uint(key, value);
    else if (key == "mask_polarity") c.mask_polarity = value;
    else if (key == "selection_mode") c.selection_mode = value;
    else if (key == "attn_map_mode") c.attn_map_mode = value;
    else if (key == "augment") c.augment = parse_bool(key, value);
    else if (key == "teacher_cache") c.teacher_cache = parse_bool(key, value);
    else if (key == "ema_additive_debug") c.ema_additive_debug = parse_bool(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

// Canonical serialization; its FNV-1a hash identifies the config in
// checkpoints. Key order is fixed.
inline std::string serialize_config(const TrainConfig& c) {
    using cfg_detail::fmt_double;
    std::string out;
    auto kv = [&](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
    kv("image_size", std::to_string(c.model.image_size));
    kv("channels", std::to_string(c.model.channels));
    kv("patch_size", std::to_string(c.model.patch_size));
    kv("embed_dim", std::to_string(c.model.embed_dim));
    kv("depth", std::to_string(c.model.depth));
    kv("heads", std::to_string(c.model.heads));
    kv("decoder_dim", std::to_string(c.model.decoder_dim));
    kv("decoder_depth", std::to_string(c.model.decoder_depth));
    kv("decoder_heads", std::to_string(c.model.decoder_heads));
    kv("mlp_ratio", fmt_double(c.model.mlp_ratio));
    kv("teacher_dim", std::to_string(c.model.teacher_dim));
    kv("teacher_depth", std::to_string(c.teacher_depth));
    kv("teacher_heads", std::to_string(c.teacher_heads));
    kv("teacher_mlp_ratio", fmt_double(c.teacher_mlp_ratio));
    kv("objective", c.objective);
    kv("mask_ratio", fmt_double(c.mask_ratio));
    kv("alpha", fmt_double(c.alpha));
    kv("ema_m", fmt_double(c.ema_m));
    kv("lr", fmt_double(c.lr));
    kv("weight_decay", fmt_double(c.weight_decay));
    kv("beta1", fmt_double(c.beta1));
    kv("beta2", fmt_double(c.beta2));
    kv("warmup_steps", std::to_string(c.warmup_steps));
    kv("total_epochs", std::to_string(c.total_epochs));
    kv("stage1_fraction", fmt_double(c.stage1_fraction));
    kv("batch_size", std::to_string(c.batch_size));
    kv("seed", std::to_string(c.seed));
    kv("mask_polarity", c.mask_polarity);
    kv("selection_mode", c.selection_mode);
    kv("attn_map_mode", c.attn_map_mode);
    kv("augment", c.augment ? "true" : "false");
    kv("teacher_cache", c.teacher_cache ? "true" : "false");
    kv("ema_additive_debug", c.ema_additive_debug ? "true" : "false");
    return out;
}

inline uint64_t config_hash(const TrainConfig& c) { return fnv1a64(serialize_config(c)); }

// Parses key=value lines ('#' starts a comment, blank lines ignored).
inline void apply_config_text(TrainConfig& c, const std::string& text, const std::string& origin) {
    size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
        size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
            line.pop_back();
        size_t start = 0;
        while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
        line.erase(0, start);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && key.back() == ' ') key.pop_back();
        while (!value.empty() && value.front() == ' ') value.erase(0, 1);
        apply_config_kv(c, key, value);
    }
}

// ---- teacher ----

struct TeacherModel {
    ViTConfig cfg;
    EncoderParams params;  // frozen
};

// Loads encoder weights from a pretraining checkpoint ("student." namespace)
// as a frozen teacher.
inline TeacherModel load_teacher(const Checkpoint& ckpt) {
    TrainConfig tcfg;
    apply_config_text(tcfg, ckpt.config_text, "teacher checkpoint config");
    TeacherModel t;
    t.cfg = tcfg.model;
    Rng dummy(0);
    t.params = init_encoder_params(t.cfg, dummy, /*trainable=*/false);
    for_each_param(t.params, "student.", [&](const std::string& name, Tensor& dst) {
        const NamedTensorEntry* e = ckpt.find(name);
        if (!e) throw DataError("teacher checkpoint: missing tensor '" + name + "'");
        if (e->shape != dst.shape())
            throw DataError("teacher checkpoint: tensor '" + name + "' has shape " +
                            shape_str(e->shape) + ", expected " + shape_str(dst.shape()));
        dst.values_mut() = e->values;
    });
    return t;
}

// ---- metrics ----

struct StepMetrics {
    int64_t step = 0;
    int stage = 1;
    double loss_total = 0.0;
    double loss_student_term = 0.0;  // unweighted; 0 before stage 2
    double loss_teacher_term = 0.0;  // unweighted; 0 for objective=pixel
    double lr = 0.0;
    double wallclock_ms = 0.0;  // the only field that may differ between
                                // identically-seeded runs
};

inline std::string metrics_json_line(const StepMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "{\"step\":%" PRId64
                  ",\"stage\":%d,\"loss_total\":%.17g,\"loss_student_term\":%.17g,"
                  "\"loss_teacher_term\":%.17g,\"lr\":%.17g,\"wallclock_ms\":%.17g}",
                  m.step, m.stage, m.loss_total, m.loss_student_term, m.loss_teacher_term, m.lr,
                  m.wallclock_ms);
    return buf;
}

inline bool metrics_equal_ignoring_wallclock(const StepMetrics& a, const StepMetrics& b) {
    return a.step == b.step && a.stage == b.stage && a.loss_total == b.loss_total &&
           a.loss_student_term == b.loss_student_term &&
           a.loss_teacher_term == b.loss_teacher_term && a.lr == b.lr;
}

// Append-only JSONL sink, flushed per line.
class MetricsWriter {
  public:
    MetricsWriter() = default;

    explicit MetricsWriter(const std::string& path) : path_(path) {
        file_ = std::fopen(path.c_str(), "a");
        if (!file_) throw DataError("cannot open metrics file '" + path + "' for append");
    }

    MetricsWriter(const MetricsWriter&) = delete;
    MetricsWriter& operator=(const MetricsWriter&) = delete;

    MetricsWriter(MetricsWriter&& other) noexcept : path_(std::move(other.path_)), file_(other.file_) {
        other.file_ = nullptr;
    }

    MetricsWriter& operator=(MetricsWriter&& other) noexcept {
        if (this != &other) {
            if (file_) std::fclose(file_);
            path_ = std::move(other.path_);
            file_ = other.file_;
            other.file_ = nullptr;
        }
        return *this;
    }

    ~MetricsWriter() {
        if (file_) std::fclose(file_);
    }

    void write(const StepMetrics& m) {
        if (!file_) return;
        const std::string line = metrics_json_line(m) + "\n";
        if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0)
            throw DataError("write error on metrics file '" + path_ + "'");
    }

  private:
    std::string path_;
    std::FILE* file_ = nullptr;
};

// ---- trainer ----

class Trainer {
  public:
    // The dataset is borrowed for the trainer's lifetime; temporaries would
    // dangle, so rvalues are rejected below.
    Trainer(TrainConfig cfg, const ImageDataset& data, std::optional<TeacherModel> teacher)
        : cfg_(std::move(cfg)), data_(&data) {
        if (cfg_.objective == "cmt") {
            if (!teacher) throw ConfigError("objective=cmt requires a teacher checkpoint");
            teacher_ = std::move(*teacher);
            check_teacher_geometry();
            cfg_.model.teacher_dim = teacher_->cfg.embed_dim;
            cfg_.teacher_depth = teacher_->cfg.depth;
            cfg_.teacher_heads = teacher_->cfg.heads;
            cfg_.teacher_mlp_ratio = teacher_->cfg.mlp_ratio;
        }
        cfg_.validate();
        check_data_geometry();

        steps_per_epoch_ = static_cast<int64_t>(data_->count()) / cfg_.batch_size;
        if (steps_per_epoch_ < 1)
            throw ConfigError("batch_size " + std::to_string(cfg_.batch_size) +
                              " exceeds dataset of " + std::to_string(data_->count()) + " images");
        total_steps_ = steps_per_epoch_ * cfg_.total_epochs;
        stage1_steps_ = cfg_.objective == "cmt"
                            ? static_cast<int64_t>(cfg_.stage1_fraction * total_steps_ + 1e-9)
                            : total_steps_;
        // The schedule restarts per stage, so warmup must fit inside every
        // stage that will actually run.
        for (int64_t len : {stage1_steps_, total_steps_ - stage1_steps_}) {
            if (len > 0 && cfg_.warmup_steps > len)
                throw ConfigError("warmup_steps " + std::to_string(cfg_.warmup_steps) +
                                  " exceeds stage length " + std::to_string(len));
        }

        Rng init_rng(derive_seed(cfg_.seed, rng_purpose::init));
        student_ = init_encoder_params(cfg_.model, init_rng);
        decoder_ = init_decoder_params(cfg_.model, init_rng);
        init_rng_state_ = init_rng.state();

        AdamWConfig ocfg;
        ocfg.lr = cfg_.lr;
        ocfg.beta1 = cfg_.beta1;
        ocfg.beta2 = cfg_.beta2;
        ocfg.weight_decay = cfg_.weight_decay;
        opt_.emplace(ocfg);
        register_trainable_params();
    }

    Trainer(TrainConfig, const ImageDataset&&, std::optional<TeacherModel>) = delete;

    // One optimizer step over the next batch. Handles the stage transition.
    StepMetrics step() {
        if (finished()) throw ContractError("step() after training finished");
        const auto t0 = std::chrono::steady_clock::now();
        if (cfg_.objective == "cmt" && stage_ == 1 && step_ == stage1_steps_) enter_stage2();

        const int64_t epoch = step_ / steps_per_epoch_;
        const int64_t pos = step_ % steps_per_epoch_;
        ensure_epoch_order(epoch);

        StepMetrics m;
        m.step = step_;
        m.stage = stage_;
        // Each stage runs its own warmup+cosine cycle. Stage 2 starts a fresh
        // prediction head, so it warms up from zero like stage 1 did.
        const int64_t stage_origin = stage_ == 2 ? stage1_steps_ : 0;
        const int64_t stage_len = stage_ == 2 ? total_steps_ - stage1_steps_ : stage1_steps_;
        m.lr = lr_schedule(step_ - stage_origin, cfg_.warmup_steps, stage_len, cfg_.lr);

        Tensor acc;
        double student_sum = 0.0, teacher_sum = 0.0;
        for (int slot = 0; slot < cfg_.batch_size; ++slot) {
            const uint64_t index = epoch_order_[static_cast<size_t>(pos) * cfg_.batch_size + slot];
            bool flip = false;
            if (cfg_.augment) {
                Rng frng(derive_seed(cfg_.seed, rng_purpose::augment, static_cast<uint64_t>(step_),
                                     static_cast<uint64_t>(slot)));
                flip = frng.next_below(2) == 1;
            }
            const Tensor patches = patchify(data_->image_standardized(index, flip), cfg_.model);

            Tensor loss_i;
            if (cfg_.objective == "pixel") {
                loss_i = pixel_image_loss(patches, slot);
            } else if (stage_ == 1) {
                loss_i = stage1_image_loss(patches, index, flip, slot);
                teacher_sum += loss_i.item();
            } else {
                CollaborativeLoss parts = stage2_image_loss(patches, index, flip, slot);
                student_sum += parts.student_term.item();
                teacher_sum += parts.teacher_term.item();
                loss_i = parts.total;
            }
            acc = acc.defined() ? add(acc, loss_i) : loss_i;
        }
        Tensor batch_loss = scale(acc, 1.0 / cfg_.batch_size);

        m.loss_total = batch_loss.item();
        m.loss_student_term = student_sum / cfg_.batch_size;
        m.loss_teacher_term = teacher_sum / cfg_.batch_size;
        if (!std::isfinite(m.loss_total))
            throw NumericError("non-finite loss " + std::to_string(m.loss_total) + " at step " +
                               std::to_string(step_) + " (stage " + std::to_string(stage_) +
                               ", teacher term " + std::to_string(m.loss_teacher_term) +
                               ", student term " + std::to_string(m.loss_student_term) + ")");

        backward(batch_loss);
        opt_->step(m.lr);
        opt_->zero_grad();
        if (stage_ == 2 && momentum_) {
            if (cfg_.ema_additive_debug) {
                ema_update_additive(*momentum_, student_);
            } else {
                ema_update(*momentum_, student_);
            }
        }
        ++step_;
        const auto t1 = std::chrono::steady_clock::now();
        m.wallclock_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        return m;
    }

    bool finished() const { return step_ >= total_steps_; }
    int64_t steps_done() const { return step_; }
    int64_t total_steps() const { return total_steps_; }
    int64_t stage1_steps() const { return stage1_steps_; }
    int stage() const { return stage_; }
    const TrainConfig& config() const { return cfg_; }
    const EncoderParams& student() const { return student_; }
    const DecoderParams& decoder() const { return decoder_; }
    const std::optional<TeacherModel>& teacher() const { return teacher_; }
    const std::optional<MomentumState>& momentum() const { return momentum_; }
    const AdamW& optimizer() const { return *opt_; }

    Checkpoint make_checkpoint() const {
        Checkpoint c;
        c.config_text = serialize_config(cfg_);
        c.config_hash = fnv1a64(c.config_text);
        c.step = static_cast<uint64_t>(step_);
        c.stage = static_cast<uint32_t>(stage_);
        c.has_momentum = momentum_.has_value();
        c.epoch = static_cast<uint64_t>(step_ / steps_per_epoch_);
        c.opt_steps = static_cast<uint64_t>(opt_->steps_taken());
        c.master_seed = cfg_.seed;
        c.init_rng_state = init_rng_state_;

        auto dump = [&](auto& params, const std::string& prefix) {
            for_each_param(const_cast<std::remove_cvref_t<decltype(params)>&>(params), prefix,
                           [&](const std::string& name, Tensor& t) {
                               c.tensors.push_back({name, t.shape(), t.values()});
                           });
        };
        dump(student_, "student.");
        dump(decoder_, "decoder.");
        if (teacher_) dump(teacher_->params, "teacher.");
        if (momentum_) dump(momentum_->shadow, "momentum.");
        for (const AdamW::Slot& s : opt_->slots()) {
            c.tensors.push_back({"opt.m." + s.name, s.param.shape(), s.m});
            c.tensors.push_back({"opt.v." + s.name, s.param.shape(), s.v});
        }
        return c;
    }

    void save(const std::string& path) const { save_checkpoint(path, make_checkpoint()); }

    // Rebuilds a trainer mid-run. The teacher is restored from the checkpoint
    // itself; cfg must hash-match the checkpoint's config.
    static Trainer resume(const Checkpoint&, TrainConfig, const ImageDataset&&) = delete;

    static Trainer resume(const Checkpoint& ckpt, TrainConfig cfg, const ImageDataset& data) {
        std::optional<TeacherModel> teacher;
        if (cfg.objective == "cmt") {
            if (!ckpt.find("teacher.cls_token"))
                throw DataError("checkpoint: missing teacher weights for objective=cmt");
            TeacherModel t;
            TrainConfig stored;
            apply_config_text(stored, ckpt.config_text, "checkpoint config");
            // Same grid as the student; its own width/depth, recorded in the
            // teacher_* config keys at the original construction.
            t.cfg = stored.model;
            t.cfg.embed_dim = stored.model.teacher_dim;
            t.cfg.depth = stored.teacher_depth;
            t.cfg.heads = stored.teacher_heads;
            t.cfg.mlp_ratio = stored.teacher_mlp_ratio;
            Rng dummy(0);
            t.params = init_encoder_params(t.cfg, dummy, false);
            for_each_param(t.params, "teacher.", [&](const std::string& name, Tensor& dst) {
                const NamedTensorEntry* e = ckpt.find(name);
                if (!e) throw DataError("checkpoint: missing tensor '" + name + "'");
                if (e->shape != dst.shape())
                    throw DataError("checkpoint: tensor '" + name + "' has shape " +
                                    shape_str(e->shape) + ", expected " + shape_str(dst.shape()));
                dst.values_mut() = e->values;
            });
            teacher = std::move(t);
        }

        Trainer tr(std::move(cfg), data, std::move(teacher));
        const std::string want = serialize_config(tr.cfg_);
        if (fnv1a64(want) != ckpt.config_hash)
            throw ConfigError("checkpoint config hash mismatch: checkpoint was written with a "
                              "different configuration (stored config:\n" +
                              ckpt.config_text + ")");
        if (ckpt.step > static_cast<uint64_t>(tr.total_steps_))
            throw DataError("checkpoint step " + std::to_string(ckpt.step) +
                            " exceeds configured total of " + std::to_string(tr.total_steps_));

        tr.step_ = static_cast<int64_t>(ckpt.step);
        if (ckpt.stage == 2) {
            tr.enter_stage2();
        } else if (ckpt.stage != 1) {
            throw DataError("checkpoint: bad stage " + std::to_string(ckpt.stage));
        }

        size_t consumed = 0;
        auto load = [&](auto& params, const std::string& prefix) {
            for_each_param(params, prefix, [&](const std::string& name, Tensor& dst) {
                const NamedTensorEntry* e = ckpt.find(name);
                if (!e) throw DataError("checkpoint: missing tensor '" + name + "'");
                if (e->shape != dst.shape())
                    throw DataError("checkpoint: tensor '" + name + "' has shape " +
                                    shape_str(e->shape) + ", expected " + shape_str(dst.shape()));
                dst.values_mut() = e->values;
                ++consumed;
            });
        };
        load(tr.student_, "student.");
        load(tr.decoder_, "decoder.");
        if (tr.teacher_) consumed += count_tensors(tr.teacher_->params);  // loaded above
        if (ckpt.has_momentum != tr.momentum_.has_value())
            throw DataError("checkpoint: momentum presence does not match stage");
        if (tr.momentum_) load(tr.momentum_->shadow, "momentum.");

        for (AdamW::Slot& s : tr.opt_->slots_mut()) {
            for (const char* kind : {"m", "v"}) {
                const std::string name = std::string("opt.") + kind + "." + s.name;
                const NamedTensorEntry* e = ckpt.find(name);
                if (!e) throw DataError("checkpoint: missing tensor '" + name + "'");
                if (static_cast<int64_t>(e->values.size()) != s.param.numel())
                    throw DataError("checkpoint: tensor '" + name + "' has wrong size");
                (kind[0] == 'm' ? s.m : s.v) = e->values;
                ++consumed;
            }
        }
        tr.opt_->set_steps_taken(static_cast<int64_t>(ckpt.opt_steps));
        tr.init_rng_state_ = ckpt.init_rng_state;

        if (consumed != ckpt.tensors.size()) {
            for (const auto& t : ckpt.tensors) {
                const bool known = t.name.rfind("student.", 0) == 0 ||
                                   t.name.rfind("decoder.", 0) == 0 ||
                                   t.name.rfind("teacher.", 0) == 0 ||
                                   t.name.rfind("momentum.", 0) == 0 ||
                                   t.name.rfind("opt.", 0) == 0;
                if (!known) throw DataError("checkpoint: unexpected tensor '" + t.name + "'");
            }
            throw DataError("checkpoint: tensor count mismatch (" + std::to_string(consumed) +
                            " consumed of " + std::to_string(ckpt.tensors.size()) + ")");
        }
        return tr;
    }

  private:
    template <typename Params>
    static size_t count_tensors(const Params& p) {
        size_t n = 0;
        for_each_param(const_cast<Params&>(p), "", [&](const std::string&, Tensor&) { ++n; });
        return n;
    }

    void check_teacher_geometry() const {
        const ViTConfig& m = cfg_.model;
        const ViTConfig& t = teacher_->cfg;
        if (t.image_size != m.image_size || t.patch_size != m.patch_size || t.channels != m.channels)
            throw ConfigError("teacher geometry " + std::to_string(t.image_size) + "/" +
                              std::to_string(t.patch_size) + "/" + std::to_string(t.channels) +
                              " does not match model " + std::to_string(m.image_size) + "/" +
                              std::to_string(m.patch_size) + "/" + std::to_string(m.channels));
    }

    void check_data_geometry() const {
        if (static_cast<int>(data_->height) != cfg_.model.image_size ||
            static_cast<int>(data_->width) != cfg_.model.image_size ||
            static_cast<int>(data_->channels) != cfg_.model.channels)
            throw DataError("dataset images " + std::to_string(data_->channels) + "x" +
                            std::to_string(data_->height) + "x" + std::to_string(data_->width) +
                            " do not match configured model " + std::to_string(cfg_.model.channels) +
                            "x" + std::to_string(cfg_.model.image_size) + "x" +
                            std::to_string(cfg_.model.image_size));
    }

    // Active heads: stage decides which decoder heads train. The teacher and
    // momentum shadow are never registered anywhere.
    void register_trainable_params() {
        for_each_param(student_, "student.",
                       [&](const std::string& name, Tensor& t) { opt_->add_param(name, t); });
        for_each_param(decoder_, "decoder.", [&](const std::string& name, Tensor& t) {
            if (name.rfind("decoder.head_", 0) == 0) return;  // heads handled below
            opt_->add_param(name, t);
        });
        if (cfg_.objective == "pixel") {
            opt_->add_param("decoder.head_pixel.w", decoder_.head_pixel.w);
            opt_->add_param("decoder.head_pixel.b", decoder_.head_pixel.b);
        } else {
            opt_->add_param("decoder.head_teacher.w", decoder_.head_teacher.w);
            opt_->add_param("decoder.head_teacher.b", decoder_.head_teacher.b);
        }
    }

    // Stage boundary: shadow starts from the current student; the student
    // head starts fresh with no stage-1 gradient history.
    void enter_stage2() {
        momentum_ = init_momentum(student_, cfg_.ema_m);
        Rng head_rng(derive_seed(cfg_.seed, rng_purpose::head_reinit));
        decoder_.head_student =
            detail::init_linear(cfg_.model.decoder_dim, cfg_.model.embed_dim, head_rng, true);
        opt_->add_param("decoder.head_student.w", decoder_.head_student.w);
        opt_->add_param("decoder.head_student.b", decoder_.head_student.b);
        stage_ = 2;
    }

    void ensure_epoch_order(int64_t epoch) {
        if (epoch == epoch_cached_ && !epoch_order_.empty()) return;
        epoch_order_.resize(data_->count());
        for (uint64_t i = 0; i < data_->count(); ++i) epoch_order_[i] = i;
        Rng order_rng(derive_seed(cfg_.seed, rng_purpose::data_order, static_cast<uint64_t>(epoch)));
        order_rng.shuffle(epoch_order_);
        epoch_cached_ = epoch;
    }

    struct TeacherOutputs {
        AttentionMap attention;
        std::vector<double> features;  // [N, teacher_dim] row-normalized
    };

    const TeacherOutputs& teacher_outputs(const Tensor& patches, uint64_t index, bool flip) {
        const uint64_t key = index * 2 + (flip ? 1 : 0);
        if (cfg_.teacher_cache) {
            auto it = teacher_cache_.find(key);
            if (it != teacher_cache_.end()) return it->second;
        }
        EncoderOutput enc = encode(patches, MaskSet{}, teacher_->params, teacher_->cfg);
        TeacherOutputs out;
        out.attention = extract_attention(enc, cfg_.attn_map_mode);
        Tensor feats = layer_norm(
            slice_rows(enc.tokens, 1, 1 + teacher_->cfg.num_patches()), kTargetNormEps);
        out.features = feats.values();
        if (cfg_.teacher_cache) return teacher_cache_[key] = std::move(out);
        return teacher_scratch_ = std::move(out);
    }

    MaskSet select_mask(const AttentionMap& map, int slot) {
        const SelectionMode mode = parse_selection_mode(cfg_.selection_mode);
        const MaskPolarity pol = parse_mask_polarity(cfg_.mask_polarity);
        if (mode == SelectionMode::topk) return select_mask_topk(map, cfg_.mask_ratio, pol);
        Rng mask_rng(derive_seed(cfg_.seed, rng_purpose::mask, static_cast<uint64_t>(step_),
                                 static_cast<uint64_t>(slot)));
        if (mode == SelectionMode::random)
            return select_mask_random(map.size(), cfg_.mask_ratio, mask_rng);
        return select_mask_stochastic(map, cfg_.mask_ratio, mask_rng, pol);
    }

    Tensor pixel_image_loss(const Tensor& patches, int slot) {
        Rng mask_rng(derive_seed(cfg_.seed, rng_purpose::mask, static_cast<uint64_t>(step_),
                                 static_cast<uint64_t>(slot)));
        const MaskSet mask = select_mask_random(cfg_.model.num_patches(), cfg_.mask_ratio, mask_rng);
        EncoderOutput enc = encode(patches, mask, student_, cfg_.model);
        DecoderOutput dec = decode(enc, mask, decoder_, cfg_.model);
        const PixelTargets targets = make_pixel_targets(patches, mask);
        return mae_pixel_loss(gather_rows(dec.pred_pixel, mask.indices), targets, mask);
    }

    Tensor stage1_image_loss(const Tensor& patches, uint64_t index, bool flip, int slot) {
        const TeacherOutputs& t = teacher_outputs(patches, index, flip);
        const MaskSet mask = select_mask(t.attention, slot);
        EncoderOutput enc = encode(patches, mask, student_, cfg_.model);
        DecoderOutput dec = decode(enc, mask, decoder_, cfg_.model);
        Tensor teacher_full = Tensor::from_values(
            {cfg_.model.num_patches(), teacher_->cfg.embed_dim}, t.features);
        const FeatureTargets targets = make_feature_targets(teacher_full, Tensor{}, mask);
        return teacher_feature_loss(gather_rows(dec.pred_teacher, mask.indices), targets, mask);
    }

    CollaborativeLoss stage2_image_loss(const Tensor& patches, uint64_t index, bool flip, int slot) {
        const TeacherOutputs& t = teacher_outputs(patches, index, flip);
        MomentumForwardResult mf = momentum_forward(patches, *momentum_, cfg_.model,
                                                    cfg_.attn_map_mode, kTargetNormEps);
        const AttentionMap combined = aggregate_attention(mf.attention, t.attention, cfg_.alpha);
        const MaskSet mask = select_mask(combined, slot);
        EncoderOutput enc = encode(patches, mask, student_, cfg_.model);
        DecoderOutput dec = decode(enc, mask, decoder_, cfg_.model);
        Tensor teacher_full = Tensor::from_values(
            {cfg_.model.num_patches(), teacher_->cfg.embed_dim}, t.features);
        const FeatureTargets targets = make_feature_targets(teacher_full, mf.features, mask);
        return collaborative_loss(gather_rows(dec.pred_student, mask.indices),
                                  gather_rows(dec.pred_teacher, mask.indices), targets, mask,
                                  cfg_.alpha);
    }

    TrainConfig cfg_;
    const ImageDataset* data_;
    std::optional<TeacherModel> teacher_;
    EncoderParams student_;
    DecoderParams decoder_;
    std::optional<MomentumState> momentum_;
    std::optional<AdamW> opt_;
    std::array<uint64_t, 4> init_rng_state_{};
    int64_t steps_per_epoch_ = 0;
    int64_t total_steps_ = 0;
    int64_t stage1_steps_ = 0;
    int64_t step_ = 0;
    int stage_ = 1;
    int64_t epoch_cached_ = -1;
    std::vector<uint64_t> epoch_order_;
    std::unordered_map<uint64_t, TeacherOutputs> teacher_cache_;
    TeacherOutputs teacher_scratch_;
};

}  // namespace cmtmae

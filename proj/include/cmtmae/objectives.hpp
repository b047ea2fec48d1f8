#pragma once

// Reconstruction objectives. All three losses share the same skeleton:
// mean over masked patches of the per-patch squared error against a
// detached, per-row-normalized target.
//
//   pixel:   targets are normalized patch pixels
//   teacher: targets are teacher features
//   collaborative: alpha-weighted sum of the student (momentum) and teacher
//                  feature terms over a shared mask
//
// The collaborative loss is built so alpha=0 reproduces the teacher-only
// graph bit-exactly and alpha=1 the student-only graph.

#include <string>
#include <vector>

#include "cmtmae/errors.hpp"
#include "cmtmae/masking.hpp"
#include "cmtmae/tensor.hpp"

namespace cmtmae {

inline constexpr double kTargetNormEps = 1e-6;

// Row-normalized, detached target block: gather masked rows, then per-row
// mean/variance normalization without affine.
inline Tensor make_target_rows(const Tensor& full, const MaskSet& mask, double eps = kTargetNormEps) {
    if (full.rank() != 2 || full.shape()[0] != mask.total)
        throw DimensionError("make_target_rows: " + shape_str(full.shape()) + " for " +
                             std::to_string(mask.total) + " patches");
    return layer_norm(gather_rows(full.detach(), mask.indices), eps);
}

struct PixelTargets {
    Tensor rows;  // [|M|, patch_dim]
};

struct FeatureTargets {
    Tensor teacher;  // [|M|, teacher_dim]
    Tensor student;  // [|M|, embed_dim]; undefined for stage-1 use
};

inline PixelTargets make_pixel_targets(const Tensor& patches, const MaskSet& mask,
                                       double eps = kTargetNormEps) {
    return {make_target_rows(patches, mask, eps)};
}

// teacher_full: [num_patches, teacher_dim] teacher features, already
// row-normalized and detached by the producer. student_full likewise from the
// momentum encoder; pass an undefined Tensor when no student term exists.
inline FeatureTargets make_feature_targets(const Tensor& teacher_full, const Tensor& student_full,
                                           const MaskSet& mask) {
    FeatureTargets t;
    if (teacher_full.rank() != 2 || teacher_full.shape()[0] != mask.total)
        throw DimensionError("make_feature_targets: teacher " + shape_str(teacher_full.shape()) +
                             " for " + std::to_string(mask.total) + " patches");
    t.teacher = gather_rows(teacher_full, mask.indices).detach();
    if (student_full.defined()) {
        if (student_full.shape()[0] != mask.total)
            throw DimensionError("make_feature_targets: student " + shape_str(student_full.shape()) +
                                 " for " + std::to_string(mask.total) + " patches");
        t.student = gather_rows(student_full, mask.indices).detach();
    }
    return t;
}

namespace detail {

// (1/|M|) * sum of squared errors over the masked rows.
inline Tensor masked_mean_sq(const Tensor& pred_rows, const Tensor& target_rows, const MaskSet& mask,
                             const char* what) {
    if (mask.count() == 0) return Tensor::scalar(0.0);
    if (pred_rows.shape() != target_rows.shape())
        throw DimensionError(std::string(what) + ": predictions " + shape_str(pred_rows.shape()) +
                             " vs targets " + shape_str(target_rows.shape()));
    if (pred_rows.shape()[0] != mask.count())
        throw DimensionError(std::string(what) + ": " + std::to_string(pred_rows.shape()[0]) +
                             " prediction rows for " + std::to_string(mask.count()) +
                             " masked patches");
    return scale(sum(square(sub(pred_rows, target_rows))), 1.0 / mask.count());
}

}  // namespace detail

// Vanilla masked-pixel objective.
inline Tensor mae_pixel_loss(const Tensor& pred_rows, const PixelTargets& targets,
                             const MaskSet& mask) {
    return detail::masked_mean_sq(pred_rows, targets.rows, mask, "mae_pixel_loss");
}

// Stage-1 objective: reconstruct teacher features at masked positions.
inline Tensor teacher_feature_loss(const Tensor& pred_teacher_rows, const FeatureTargets& targets,
                                   const MaskSet& mask) {
    return detail::masked_mean_sq(pred_teacher_rows, targets.teacher, mask, "teacher_feature_loss");
}

struct CollaborativeLoss {
    Tensor total;         // alpha*student_term + (1-alpha)*teacher_term
    Tensor student_term;  // mean masked squared error against momentum features
    Tensor teacher_term;  // mean masked squared error against teacher features
};

// Stage-2 objective over a shared mask. Both terms always exist; the weights
// select the mixture. alpha outside [0,1] is a config error.
inline CollaborativeLoss collaborative_loss(const Tensor& pred_student_rows,
                                            const Tensor& pred_teacher_rows,
                                            const FeatureTargets& targets, const MaskSet& mask,
                                            double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ConfigError("collaborative_loss: alpha " + std::to_string(alpha) + " outside [0,1]");
    if (!targets.student.defined())
        throw ContractError("collaborative_loss: feature targets carry no student term");
    CollaborativeLoss out;
    out.student_term = detail::masked_mean_sq(pred_student_rows, targets.student, mask,
                                              "collaborative_loss(student)");
    out.teacher_term = detail::masked_mean_sq(pred_teacher_rows, targets.teacher, mask,
                                              "collaborative_loss(teacher)");
    out.total = add(scale(out.student_term, alpha), scale(out.teacher_term, 1.0 - alpha));
    return out;
}

}  // namespace cmtmae

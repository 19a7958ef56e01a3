#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cmix/rng.hpp"
#include "cmix/tensor.hpp"

namespace cmix {

// Distribution over classes, the target form mixup/CutMix produce.
struct SoftLabel {
    std::vector<float> p;

    static SoftLabel one_hot(int cls, int n_classes);
    int argmax() const;
    bool is_distribution(float tol = 1e-5f) const;
};

SoftLabel mix_labels(const SoftLabel& y1, const SoftLabel& y2, float lam);

struct AugmentConfig {
    double mixup_alpha = 0.2;
    double cutmix_alpha = 1.0;
    double erase_prob = 0.25;
    int randaug_n = 2;
    int randaug_m = 9;  // magnitude on the 0..10 scale
    bool enable_mixup = true;
    bool enable_cutmix = true;
    bool enable_erase = true;
    bool enable_randaug = true;
    bool enable_crop_flip = true;
    double crop_scale_min = 0.4;
    double crop_scale_max = 1.0;
    double crop_aspect_min = 3.0 / 4.0;
    double crop_aspect_max = 4.0 / 3.0;
    double flip_prob = 0.5;
    int out_size = 32;
    std::uint64_t rng_seed = 0;
};

// Pairwise mixup: convex combination of images and labels.
std::pair<Tensor, SoftLabel> mixup(const Tensor& x1, const Tensor& x2, const SoftLabel& y1,
                                   const SoftLabel& y2, float lam);

struct CutmixResult {
    Tensor image;
    SoftLabel label;
    float lambda_adj;
};

// CutMix with an explicit box center (testable) and the rng-drawn wrapper.
// A rectangle of area ratio (1 - lambda_raw) is copied from x2 into x1; the
// label is mixed by the realized area after clamping to the image bounds.
CutmixResult cutmix_at(const Tensor& x1, const Tensor& x2, const SoftLabel& y1, const SoftLabel& y2,
                       float lambda_raw, int center_x, int center_y);
CutmixResult cutmix(const Tensor& x1, const Tensor& x2, const SoftLabel& y1, const SoftLabel& y2,
                    float lambda_raw, Rng& rng);

// With probability erase_prob replaces one rectangle (area fraction in
// [0.02, 0.33], aspect in [0.3, 3.3], fully inside bounds) with standard
// normal noise.
Tensor random_erase(const Tensor& x, const AugmentConfig& cfg, Rng& rng);

// Reduced RandAugment: n ops sampled uniformly from {translate-x, translate-y,
// rotate, shear-x, shear-y, brightness, contrast, posterize, solarize}, each
// scaled by m/10. Output clamped to [0, 1].
Tensor rand_augment_lite(const Tensor& x, int n, int m, Rng& rng);

// Random resized crop (area fraction in scale_range, log-uniform aspect
// jitter) bilinearly resized to out_size, then horizontal flip. Degenerate
// draws fall back to a center crop.
Tensor random_resized_crop_flip(const Tensor& x, int out_size, std::pair<double, double> scale_range,
                                std::pair<double, double> aspect_range, double flip_prob, Rng& rng);

// Full per-sample pipeline: crop/flip, RandAugment, random erasing, then a
// final clamp to [0, 1]. Batch-level mixup/CutMix live in the trainer.
Tensor augment_image(const Tensor& x, const AugmentConfig& cfg, Rng& rng);

}  // namespace cmix

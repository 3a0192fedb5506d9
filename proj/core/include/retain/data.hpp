#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "retain/tensor.hpp"

namespace retain {

// Images are [N,C,H,W] or flat [N,D] with values in [0,1]; labels are class
// indices below class_count. `groups` is optional (empty = per-sample
// evaluation); members of one group share a label.
struct LabeledDataset {
    Tensor images;
    std::vector<int> labels;
    int64_t class_count = 0;
    std::string provenance;
    std::vector<int64_t> groups;

    int64_t size() const { return images.rank() ? images.shape[0] : 0; }
    Tensor sample_batch(const std::vector<int64_t>& indices) const;
    void validate() const;  // invariants: range, counts, label bounds

    // Simple container: one text header line "N,C,H,W,class_count\n", then per
    // sample C*H*W little-endian float32 values followed by one label byte.
    void save_container(const std::string& path) const;
    static LabeledDataset load_container(const std::string& path);
};

struct PermutationTask {
    std::vector<int64_t> forward;  // bijection on [0, D)
    uint64_t seed = 0;
    std::vector<int64_t> inverse() const;
};

PermutationTask make_pixel_permutation(int64_t dim, uint64_t seed);

// One seeded permutation applied identically to every image; labels kept.
// Seed 0 is reserved for the identity permutation (task 1 = original data).
LabeledDataset make_permuted_task(const LabeledDataset& base, uint64_t seed);

// Affine intensity transform + Gaussian pixel noise, clipped to [0,1]; the
// desk-scale stand-in for a scanner/institution intensity shift.
struct SyntheticDomainSpec {
    float gain = 1.0f;
    float offset = 0.0f;
    float noise_sigma = 0.0f;
    uint64_t seed = 0;
};

// Base task: concentric-ring images whose radial frequency encodes an ordinal
// class. O and T share labels and geometry, differing only by the intensity
// spec; equal specs produce identical datasets.
std::pair<LabeledDataset, LabeledDataset> make_synthetic_domain_pair(int64_t n_per_class, int64_t class_count,
                                                                     int64_t image_size,
                                                                     const SyntheticDomainSpec& spec_o,
                                                                     const SyntheticDomainSpec& spec_t, uint64_t seed,
                                                                     int64_t images_per_group = 1);

struct SplitSpec {
    uint64_t seed = 0;  // ratios fixed at 7:2:1
};

std::tuple<LabeledDataset, LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, const SplitSpec& spec);

// MNIST IDX (big-endian magic + dims, unsigned bytes). Pixels scaled by /255.
LabeledDataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);
void save_mnist_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path);

// Deterministic 28x28 ten-class digit corpus (seven-segment style glyphs with
// jitter, thickness and noise variation). The stand-in when real MNIST files
// are not on disk; same IDX round trip either way.
LabeledDataset make_digit_glyphs(int64_t n, uint64_t seed);

// Per image: horizontal flip with p=0.5, rotation uniform in [-45,45] degrees
// with bilinear resampling (zero padding), clipped to [0,1].
Tensor augment(const Tensor& batch, uint64_t seed);

// Rotation about the image center (+ optional horizontal flip), bilinear with
// zero padding; angle 0 without flip is the identity.
void warp_image(const float* src, float* dst, int64_t h, int64_t w, double angle_rad, bool flip);

LabeledDataset take(const LabeledDataset& ds, const std::vector<int64_t>& indices);
LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b);

}  // namespace retain

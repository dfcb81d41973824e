#pragma once

// Synthetic two-modality phantom volumes with shared anatomy and distinct
// appearance, the augmentation suite, and deterministic batch serving.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uda/losses.hpp"
#include "uda/tensor.hpp"

namespace uda {

enum class Modality { source, target };

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view s);

// Foreground classes, mirroring the cardiac labels of the original task.
enum ClassId : int { kBackground = 0, kLvMyocardium = 1, kLaBlood = 2, kLvBlood = 3, kAscAorta = 4 };

struct Structure {
    enum class Kind { ellipse, annulus, capsule };
    Kind kind = Kind::ellipse;
    int label = 0;
    double cy = 0, cx = 0;  // centre on the middle slice (pixels)
    // ellipse/annulus: outer semi-axes. capsule: ry = half length of the core
    // segment, rx = radius.
    double ry = 0, rx = 0;
    double inner_ry = 0, inner_rx = 0;  // annulus hole
    double orientation = 0;             // radians
    double drift_y = 0, drift_x = 0;    // centre shift per slice
};

struct PhantomConfig {
    int height = 64;
    int width = 64;
    int depth = 16;
    int num_classes = 5;
    int min_class_pixels = 16;
    int max_attempts = 64;

    void validate() const;
};

struct Phantom {
    std::uint64_t seed = 0;
    int attempt = 0;  // regeneration count needed to satisfy the size invariant
    int height = 0, width = 0, depth = 0;
    double body_cy = 0, body_cx = 0, body_ry = 0, body_rx = 0;
    std::vector<Structure> structures;  // rasterized in order; later wins
    LabelMap labels;                    // (D, H, W)
    Tensor<std::uint8_t> body;          // (D, H, W) 1 inside the body outline

    // Radius scale on slice z; tapers towards both ends of the stack.
    [[nodiscard]] double slice_scale(int z) const;
};

// Same seed gives a bit-identical phantom. Throws ConfigError for grids < 16.
Phantom make_phantom(std::uint64_t seed, const PhantomConfig& config);

struct ModalityRendering {
    enum class Contrast { identity, invert_gamma };

    Modality modality = Modality::source;
    double air = 0.05;
    double tissue = 0.30;
    std::vector<double> class_intensity;  // index 0 unused
    Contrast contrast = Contrast::identity;
    double gamma = 1.0;
    double noise_sigma = 0.03;
    double bias_amplitude = 0.10;
    double texture_scale = 3.0;
    double texture_amplitude = 0.0;
    double blur_sigma = 0.6;
    double intensity_jitter = 0.03;

    static ModalityRendering source_default(int num_classes = 5);
    // Inverted and gamma-compressed table with a different noise texture.
    static ModalityRendering target_default(int num_classes = 5);

    [[nodiscard]] double apply_contrast(double v) const;
};

// (D, H, W) intensities in [0, 1].
Tensor<float> render(const Phantom& phantom, const ModalityRendering& rendering, std::uint64_t noise_seed);

struct Volume {
    Tensor<float> image;  // (D, H, W)
    LabelMap labels;      // (D, H, W)
    Modality modality = Modality::source;
    std::string scan_id;
    std::uint64_t seed = 0;

    [[nodiscard]] int depth() const { return image.dim(0); }
    [[nodiscard]] int height() const { return image.dim(1); }
    [[nodiscard]] int width() const { return image.dim(2); }
    [[nodiscard]] Tensor<float> slice_image(int z) const;  // (H, W)
    [[nodiscard]] LabelMap slice_labels(int z) const;      // (H, W)
    [[nodiscard]] Volume sub_volume(int z0, int count) const;
    void validate() const;
};

struct DatasetConfig {
    PhantomConfig phantom;
    ModalityRendering source = ModalityRendering::source_default();
    ModalityRendering target = ModalityRendering::target_default();
};

struct DatasetManifest {
    std::vector<std::pair<std::string, std::string>> entries;

    void add(std::string key, std::string value) { entries.emplace_back(std::move(key), std::move(value)); }
    [[nodiscard]] std::string to_text() const;
};

struct Dataset {
    std::vector<Volume> source;
    std::vector<Volume> target;
    DatasetManifest manifest;
};

// n_source SOURCE-rendered and n_target TARGET-rendered volumes built from
// disjoint phantom seed sets.
Dataset generate_dataset(std::uint64_t seed, int n_source, int n_target, const DatasetConfig& config);

enum class IntensityNorm { none, minmax };

struct AugmentationSpec {
    double rotation_deg = 10.0;   // uniform in [-r, r]
    double translation_px = 4.0;  // per axis, uniform in [-t, t]
    double shear = 0.1;           // uniform in [-s, s]
    int elastic_spacing = 16;     // control grid spacing (pixels)
    double elastic_sigma = 1.5;   // control point displacement std (pixels)
    double gamma_lo = 0.7;
    double gamma_hi = 1.5;
    IntensityNorm normalization = IntensityNorm::minmax;

    static AugmentationSpec identity();
    void validate() const;
};

// Concrete draw from an AugmentationSpec.
//
// Forward map in (x, y) pixel coordinates about the image centre c:
//   q = c + R(angle) * [[1, shear], [0, 1]] * (p - c) + (tx, ty) + elastic(q)
// with R(a) = [[cos a, -sin a], [sin a, cos a]].
struct AugmentParams {
    double angle_rad = 0;
    double tx = 0, ty = 0;
    double shear = 0;
    double gamma = 1;
    int grid_h = 0, grid_w = 0, spacing = 16;
    std::vector<double> elastic_dy, elastic_dx;  // (grid_h, grid_w)
};

AugmentParams sample_augment(const AugmentationSpec& spec, int height, int width, std::mt19937_64& rng);

// Spatial warp applied to both (bilinear image, nearest label, border
// replicated), then gamma and normalization on the image only.
std::pair<Tensor<float>, LabelMap> apply_augment(const Tensor<float>& image, const LabelMap& label,
                                                 const AugmentParams& params, const AugmentationSpec& spec);

std::pair<Tensor<float>, LabelMap> augment(const Tensor<float>& image, const LabelMap& label,
                                           const AugmentationSpec& spec, std::mt19937_64& rng);

struct SliceRef {
    int volume = 0;
    int slice = 0;
};

struct Batch {
    Tensor<float> images;  // (N, 1, H, W)
    LabelMap labels;       // (N, H, W)
    std::vector<SliceRef> refs;
};

// Shuffled slice order for one epoch, split into batches (last one may be short).
std::vector<std::vector<SliceRef>> plan_epoch(const std::vector<Volume>& volumes, int batch_size, std::uint64_t seed,
                                              int epoch);

// Per-sample augmentation RNG is derived from (seed, scan_id, slice, epoch).
Batch make_batch(const std::vector<Volume>& volumes, const std::vector<SliceRef>& refs, const AugmentationSpec* spec,
                 std::uint64_t seed, int epoch);

std::vector<Batch> iterate_batches(const std::vector<Volume>& volumes, int batch_size, std::uint64_t seed, int epoch,
                                   const AugmentationSpec* spec = nullptr);

// L1 distance between normalized histograms of two intensity sets in [0, 1].
double histogram_l1(const std::vector<float>& a, const std::vector<float>& b, int bins = 32);

}  // namespace uda

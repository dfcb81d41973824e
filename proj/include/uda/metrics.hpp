#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "uda/tensor.hpp"

namespace uda {

// (D, H, W) binary volume, values 0/1.
using Mask3 = Tensor<std::uint8_t>;

using Spacing = std::array<double, 3>;  // (z, y, x)

// 2|P n G| / (|P| + |G|); 1.0 when both are empty.
double dice_3d(const Mask3& pred, const Mask3& gt);

// Keeps the largest connected component. connectivity is 6 or 26. Ties go to
// the component whose first voxel in (z, y, x) raster order comes first.
Mask3 largest_component(const Mask3& mask, int connectivity = 26);

// Voxels of the mask with at least one 6-neighbour outside it (volume borders
// count as outside). Returned as flat indices in raster order.
std::vector<std::size_t> surface_voxels(const Mask3& mask);

// Returned when either surface is empty.
inline constexpr double kAssdUndefined = std::numeric_limits<double>::quiet_NaN();

// Average symmetric surface distance in spacing units; kAssdUndefined if
// either surface is empty.
double assd(const Mask3& pred, const Mask3& gt, const Spacing& spacing = {1.0, 1.0, 1.0});

Mask3 binarize(const Tensor<std::uint8_t>& labels, int cls);

enum class Filtering { pred, none };

struct EvalOptions {
    int num_classes = 5;
    Filtering filtering = Filtering::pred;
    int connectivity = 26;
    Spacing spacing{1.0, 1.0, 1.0};
};

struct ScanClassResult {
    std::string scan_id;
    int cls = 0;
    double dice = 0.0;
    double assd = kAssdUndefined;
};

struct Aggregate {
    double mean = 0.0;
    double std = 0.0;  // population
    int count = 0;     // entries contributing (ASSD excludes undefined ones)
};

struct MetricsReport {
    int num_classes = 5;
    std::vector<ScanClassResult> entries;  // scan-major, class-minor
    std::vector<Aggregate> dice;           // index c - 1 for class c, then overall at the back
    std::vector<Aggregate> assd;
    int assd_undefined = 0;

    [[nodiscard]] const Aggregate& mean_dice() const { return dice.back(); }
    [[nodiscard]] const Aggregate& mean_assd() const { return assd.back(); }

    [[nodiscard]] std::string per_scan_csv() const;
    [[nodiscard]] std::string summary_csv() const;
    // "mean (std.)" table, one row per metric.
    [[nodiscard]] std::string table() const;
};

// Overall aggregates use the per-scan mean across classes as the sample.
MetricsReport evaluate_scans(const std::vector<Tensor<std::uint8_t>>& preds,
                             const std::vector<Tensor<std::uint8_t>>& gts, const std::vector<std::string>& scan_ids,
                             const EvalOptions& options);

Aggregate aggregate(const std::vector<double>& values);

std::string class_name(int cls);

}  // namespace uda

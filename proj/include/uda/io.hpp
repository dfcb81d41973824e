#pragma once

// On-disk formats.
//   <scan>.img.f32  little-endian float32, C order (D, H, W)
//   <scan>.lbl.u8   uint8 labels, same order
//   <scan>.meta     key=value sidecar: dims, modality, scan_id, seed
//   dataset.manifest  key=value generation parameters plus one
//                     `volume=<split>,<scan_id>,<image>,<labels>` line per volume

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "uda/synthdata.hpp"

namespace uda {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// '#' starts a comment; blank lines ignored. Throws ConfigError on a line
// without '='.
KeyValues parse_key_values(const std::string& text, const std::string& origin);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

void write_volume(const std::filesystem::path& dir, const Volume& v);
// `stem` is the path without extension suffixes, e.g. dir/src_000.
Volume read_volume(const std::filesystem::path& stem);

// Imports an external float32 raster with optional labels. Dimensions come
// from the arguments, not a sidecar.
Volume import_raw_volume(const std::filesystem::path& image, const std::filesystem::path& labels, int depth, int height,
                         int width, Modality modality, std::string scan_id);

struct DatasetSplits {
    std::vector<Volume> source_train;
    std::vector<Volume> source_val;
    std::vector<Volume> target_train;
    std::vector<Volume> target_val;
    std::vector<Volume> target_test;
    KeyValues manifest;
};

inline const char* kManifestName = "dataset.manifest";

void write_dataset(const std::filesystem::path& dir, const DatasetSplits& splits);
DatasetSplits read_dataset(const std::filesystem::path& dir);

// Hex digest (FNV-1a 64) of a byte string; used for config hashes.
std::string digest_hex(const std::string& bytes);

}  // namespace uda

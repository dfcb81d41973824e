#include "uda/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "uda/rng.hpp"

namespace uda {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "raw formats assume a little-endian host");

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<char> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw IoError("write failed: " + path.string());
}

std::string lookup(const KeyValues& kv, const std::string& key, const std::string& origin) {
    for (const auto& [k, v] : kv) {
        if (k == key) return v;
    }
    throw ConfigError(origin + ": missing key '" + key + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    return out;
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
    KeyValues out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        }
        out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
}

std::string read_text(const fs::path& path) {
    const auto bytes = read_bytes(path);
    return {bytes.begin(), bytes.end()};
}

void write_text(const fs::path& path, const std::string& text) { write_bytes(path, text.data(), text.size()); }

void write_volume(const fs::path& dir, const Volume& v) {
    v.validate();
    fs::create_directories(dir);
    const fs::path stem = dir / v.scan_id;
    write_bytes(stem.string() + ".img.f32", v.image.data.data(), v.image.data.size() * sizeof(float));
    write_bytes(stem.string() + ".lbl.u8", v.labels.data.data(), v.labels.data.size());
    std::ostringstream meta;
    meta << "scan_id=" << v.scan_id << "\nmodality=" << modality_name(v.modality) << "\ndepth=" << v.depth()
         << "\nheight=" << v.height() << "\nwidth=" << v.width() << "\nseed=" << v.seed << "\n";
    write_text(stem.string() + ".meta", meta.str());
}

Volume read_volume(const fs::path& stem) {
    const std::string meta_path = stem.string() + ".meta";
    const auto kv = parse_key_values(read_text(meta_path), meta_path);
    const int d = std::stoi(lookup(kv, "depth", meta_path));
    const int h = std::stoi(lookup(kv, "height", meta_path));
    const int w = std::stoi(lookup(kv, "width", meta_path));
    Volume v = import_raw_volume(stem.string() + ".img.f32", stem.string() + ".lbl.u8", d, h, w,
                                 parse_modality(lookup(kv, "modality", meta_path)), lookup(kv, "scan_id", meta_path));
    v.seed = std::stoull(lookup(kv, "seed", meta_path));
    return v;
}

Volume import_raw_volume(const fs::path& image, const fs::path& labels, int depth, int height, int width,
                         Modality modality, std::string scan_id) {
    if (depth < 1 || height < 1 || width < 1) throw ConfigError("import: non-positive dimensions");
    Volume v;
    v.modality = modality;
    v.scan_id = std::move(scan_id);
    v.image = Tensor<float>({depth, height, width});
    v.labels = LabelMap({depth, height, width});
    const auto img = read_bytes(image);
    if (img.size() != v.image.data.size() * sizeof(float)) {
        throw ShapeError(image.string() + ": expected " + std::to_string(v.image.data.size() * sizeof(float)) +
                         " bytes, found " + std::to_string(img.size()));
    }
    std::memcpy(v.image.data.data(), img.data(), img.size());
    if (!labels.empty()) {
        const auto lbl = read_bytes(labels);
        if (lbl.size() != v.labels.data.size()) {
            throw ShapeError(labels.string() + ": expected " + std::to_string(v.labels.data.size()) + " bytes, found " +
                             std::to_string(lbl.size()));
        }
        std::memcpy(v.labels.data.data(), lbl.data(), lbl.size());
    }
    return v;
}

void write_dataset(const fs::path& dir, const DatasetSplits& s) {
    fs::create_directories(dir);
    std::ostringstream m;
    for (const auto& [k, v] : s.manifest) m << k << '=' << v << '\n';
    auto emit = [&](const char* split_name, const std::vector<Volume>& vols) {
        for (const auto& v : vols) {
            write_volume(dir, v);
            m << "volume=" << split_name << ',' << v.scan_id << ',' << v.scan_id << ".img.f32," << v.scan_id
              << ".lbl.u8\n";
        }
    };
    emit("source_train", s.source_train);
    emit("source_val", s.source_val);
    emit("target_train", s.target_train);
    emit("target_val", s.target_val);
    emit("target_test", s.target_test);
    write_text(dir / kManifestName, m.str());
}

DatasetSplits read_dataset(const fs::path& dir) {
    const fs::path mpath = dir / kManifestName;
    if (!fs::exists(mpath)) throw ConfigError("no dataset manifest at " + mpath.string());
    DatasetSplits s;
    for (auto& [k, v] : parse_key_values(read_text(mpath), mpath.string())) {
        if (k != "volume") {
            s.manifest.emplace_back(k, v);
            continue;
        }
        const auto parts = split(v, ',');
        if (parts.size() != 4) throw ConfigError(mpath.string() + ": malformed volume entry '" + v + "'");
        Volume vol = read_volume(dir / parts[1]);
        const std::string& sp = parts[0];
        if (sp == "source_train")
            s.source_train.push_back(std::move(vol));
        else if (sp == "source_val")
            s.source_val.push_back(std::move(vol));
        else if (sp == "target_train")
            s.target_train.push_back(std::move(vol));
        else if (sp == "target_val")
            s.target_val.push_back(std::move(vol));
        else if (sp == "target_test")
            s.target_test.push_back(std::move(vol));
        else
            throw ConfigError(mpath.string() + ": unknown split '" + sp + "'");
    }
    return s;
}

std::string digest_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_string(bytes)));
    return buf;
}

}  // namespace uda

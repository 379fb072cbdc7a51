#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reft/model.hpp"
#include "reft/refusal.hpp"
#include "reft/rng.hpp"

namespace reft {

// Checkpoint layout: <dir>/manifest.txt (versioned text, one line per tensor
// with name, shape and float offset) and <dir>/weights.bin (raw little-endian
// float32, tensors back to back, optional refusal direction last).

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kManifestName = "manifest.txt";
inline constexpr const char* kBlobName = "weights.bin";

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};

template <class T>
struct Checkpoint {
    ModelState<T> state;
    std::optional<RefusalFeature<T>> refusal;
};

inline std::string_view to_string(TrainableMask m) {
    switch (m) {
        case TrainableMask::BaseOnly: return "base_only";
        case TrainableMask::BaseAndAdapters: return "base_and_adapters";
        case TrainableMask::AdaptersOnly: return "adapters_only";
    }
    return "?";
}

inline TrainableMask mask_from_string(std::string_view s) {
    if (s == "base_only") return TrainableMask::BaseOnly;
    if (s == "base_and_adapters") return TrainableMask::BaseAndAdapters;
    if (s == "adapters_only") return TrainableMask::AdaptersOnly;
    throw CheckpointError("unknown trainable mask: " + std::string(s));
}

namespace detail {

inline void append_le(std::string& blob, float f) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((u >> (8 * i)) & 0xffu));
}

inline float read_le(const std::string& blob, std::size_t index) {
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[index * 4 + i])) << (8 * i);
    return std::bit_cast<float>(u);
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + p.string());
}

}  // namespace detail

template <class T>
void save_checkpoint(const ModelState<T>& state, const std::optional<RefusalFeature<T>>& refusal,
                     const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto& c = state.config;
    std::string blob;
    std::ostringstream man;
    man << "reft-checkpoint " << kCheckpointVersion << "\n";
    man << "config n_layers " << c.n_layers << " d_model " << c.d_model << " n_heads " << c.n_heads << " d_ff "
        << c.d_ff << " vocab_size " << c.vocab_size << " ctx_len " << c.ctx_len << " tap_layer " << c.tap_layer
        << " adapter_rank " << c.adapter_rank << "\n";
    man << "mask " << to_string(state.mask) << "\n";
    std::ostringstream tensors;
    visit_tensors(
        [&](const std::string& name, bool, const Mat<T>& m) {
            tensors << "tensor " << name << " " << m.rows() << " " << m.cols() << " " << blob.size() / 4 << "\n";
            for (Eigen::Index i = 0; i < m.size(); ++i) detail::append_le(blob, static_cast<float>(m.data()[i]));
        },
        state.params);
    if (refusal) {
        tensors << "refusal layer " << refusal->layer << " n_us " << refusal->n_us << " n_s " << refusal->n_s
                << " version " << refusal->version << " width " << refusal->direction.size() << " offset "
                << blob.size() / 4 << "\n";
        for (Eigen::Index i = 0; i < refusal->direction.size(); ++i)
            detail::append_le(blob, static_cast<float>(refusal->direction(i)));
    }
    man << "blob " << kBlobName << " floats " << blob.size() / 4 << " fnv1a64 " << detail::hex64(fnv1a64(blob))
        << "\n";
    man << tensors.str() << "end\n";
    detail::write_file(dir / kBlobName, blob);
    detail::write_file(dir / kManifestName, man.str());
}

template <class T>
void save_checkpoint(const ModelState<T>& state, const std::filesystem::path& dir) {
    save_checkpoint<T>(state, std::nullopt, dir);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / kManifestName)) throw CheckpointError("no checkpoint manifest in " + dir.string());
    std::istringstream man(detail::read_file(dir / kManifestName));
    std::string line, word;
    auto next_line = [&](const char* what) {
        if (!std::getline(man, line)) throw CheckpointError(std::string("corrupt manifest: missing ") + what);
        return std::istringstream(line);
    };

    {
        auto ls = next_line("header");
        int version = 0;
        if (!(ls >> word >> version) || word != "reft-checkpoint") throw CheckpointError("corrupt manifest: bad header");
        if (version != kCheckpointVersion)
            throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                         std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint<T> ck;
    auto& cfg = ck.state.config;
    {
        auto ls = next_line("config");
        ls >> word;
        if (word != "config") throw CheckpointError("corrupt manifest: expected config line");
        std::string key;
        int value = 0;
        int seen = 0;
        while (ls >> key >> value) {
            ++seen;
            if (key == "n_layers") cfg.n_layers = value;
            else if (key == "d_model") cfg.d_model = value;
            else if (key == "n_heads") cfg.n_heads = value;
            else if (key == "d_ff") cfg.d_ff = value;
            else if (key == "vocab_size") cfg.vocab_size = value;
            else if (key == "ctx_len") cfg.ctx_len = value;
            else if (key == "tap_layer") cfg.tap_layer = value;
            else if (key == "adapter_rank") cfg.adapter_rank = value;
            else throw CheckpointError("corrupt manifest: unknown config key " + key);
        }
        if (seen != 8) throw CheckpointError("corrupt manifest: incomplete config");
        try {
            cfg.validate();
        } catch (const ConfigError& e) {
            throw CheckpointError(std::string("corrupt manifest: ") + e.what());
        }
    }
    {
        auto ls = next_line("mask");
        ls >> word;
        if (word != "mask") throw CheckpointError("corrupt manifest: expected mask line");
        ls >> word;
        ck.state.mask = mask_from_string(word);
    }
    std::size_t n_floats = 0;
    std::string checksum, blob_name;
    {
        auto ls = next_line("blob");
        std::string k1, k2;
        if (!(ls >> word >> blob_name >> k1 >> n_floats >> k2 >> checksum) || word != "blob" || k1 != "floats" ||
            k2 != "fnv1a64")
            throw CheckpointError("corrupt manifest: bad blob line");
    }
    const std::string blob = detail::read_file(dir / blob_name);
    if (blob.size() != n_floats * 4)
        throw CheckpointError("corrupt checkpoint: array length mismatch (manifest says " + std::to_string(n_floats) +
                              " floats, blob holds " + std::to_string(blob.size()) + " bytes)");
    if (detail::hex64(fnv1a64(blob)) != checksum) throw CheckpointError("corrupt checkpoint: blob checksum mismatch");

    // Shapes come from the config; the manifest must agree entry by entry.
    ModelState<T> shape = init_model<T>(cfg, 0);
    ck.state.params = shape.params;
    std::size_t cursor = 0;
    visit_tensors(
        [&](const std::string& name, bool, Mat<T>& m) {
            auto ls = next_line("tensor");
            std::string tag, tname;
            Eigen::Index rows = 0, cols = 0;
            std::size_t offset = 0;
            if (!(ls >> tag >> tname >> rows >> cols >> offset) || tag != "tensor")
                throw CheckpointError("corrupt manifest: bad tensor line for " + name);
            if (tname != name || rows != m.rows() || cols != m.cols() || offset != cursor)
                throw CheckpointError("corrupt manifest: tensor entry mismatch at " + name);
            if (offset + static_cast<std::size_t>(m.size()) > n_floats)
                throw CheckpointError("corrupt checkpoint: array length mismatch at " + name);
            for (Eigen::Index i = 0; i < m.size(); ++i)
                m.data()[i] = static_cast<T>(detail::read_le(blob, offset + static_cast<std::size_t>(i)));
            cursor += static_cast<std::size_t>(m.size());
        },
        ck.state.params);

    auto ls = next_line("end");
    ls >> word;
    if (word == "refusal") {
        RefusalFeature<T> r;
        std::string k[6];
        Eigen::Index width = 0;
        std::size_t offset = 0;
        if (!(ls >> k[0] >> r.layer >> k[1] >> r.n_us >> k[2] >> r.n_s >> k[3] >> r.version >> k[4] >> width >> k[5] >>
              offset) ||
            k[0] != "layer" || k[1] != "n_us" || k[2] != "n_s" || k[3] != "version" || k[4] != "width" ||
            k[5] != "offset")
            throw CheckpointError("corrupt manifest: bad refusal line");
        if (width != cfg.d_model || offset != cursor || offset + static_cast<std::size_t>(width) > n_floats)
            throw CheckpointError("corrupt checkpoint: refusal feature array mismatch");
        r.direction.resize(width);
        for (Eigen::Index i = 0; i < width; ++i) r.direction(i) = static_cast<T>(detail::read_le(blob, offset + i));
        cursor += static_cast<std::size_t>(width);
        ck.refusal = std::move(r);
        ls = next_line("end");
        ls >> word;
    }
    if (word != "end") throw CheckpointError("corrupt manifest: expected end marker");
    if (cursor != n_floats) throw CheckpointError("corrupt checkpoint: array length mismatch (trailing data)");
    return ck;
}

/// Standalone refusal-feature export: <stem>.txt record plus <stem>.bin floats.
template <class T>
void export_refusal_feature(const RefusalFeature<T>& r, const std::filesystem::path& stem) {
    std::string blob;
    for (Eigen::Index i = 0; i < r.direction.size(); ++i) detail::append_le(blob, static_cast<float>(r.direction(i)));
    std::ostringstream rec;
    rec << "reft-refusal-feature " << kCheckpointVersion << "\nlayer " << r.layer << "\nn_us " << r.n_us << "\nn_s "
        << r.n_s << "\nversion " << r.version << "\nwidth " << r.direction.size() << "\nfnv1a64 "
        << detail::hex64(fnv1a64(blob)) << "\n";
    auto bin = stem;
    bin += ".bin";
    auto txt = stem;
    txt += ".txt";
    detail::write_file(bin, blob);
    detail::write_file(txt, rec.str());
}

template <class T>
RefusalFeature<T> import_refusal_feature(const std::filesystem::path& stem) {
    auto bin = stem;
    bin += ".bin";
    auto txt = stem;
    txt += ".txt";
    std::istringstream rec(detail::read_file(txt));
    std::string magic, key, checksum;
    int version = 0;
    RefusalFeature<T> r;
    Eigen::Index width = 0;
    if (!(rec >> magic >> version) || magic != "reft-refusal-feature") throw CheckpointError("corrupt refusal record");
    if (version != kCheckpointVersion) throw CheckpointVersionError("refusal record version mismatch");
    if (!(rec >> key >> r.layer >> key >> r.n_us >> key >> r.n_s >> key >> r.version >> key >> width >> key >>
          checksum))
        throw CheckpointError("corrupt refusal record");
    const std::string blob = detail::read_file(bin);
    if (blob.size() != static_cast<std::size_t>(width) * 4) throw CheckpointError("refusal blob length mismatch");
    if (detail::hex64(fnv1a64(blob)) != checksum) throw CheckpointError("refusal blob checksum mismatch");
    r.direction.resize(width);
    for (Eigen::Index i = 0; i < width; ++i) r.direction(i) = static_cast<T>(detail::read_le(blob, static_cast<std::size_t>(i)));
    return r;
}

}  // namespace reft

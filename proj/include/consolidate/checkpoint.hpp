#pragma once

// Checkpoints, their architecture manifest, and the MRGF container.
//
// MRGF layout (little-endian):
//   0   magic   "MRGF"
//   4   u32     format version (1)
//   8   u64     header length H
//   16  H bytes UTF-8 JSON {manifest, kind, source_tag, tensor_order}
//   16+H        raw row-major float32 tensor data in tensor_order, no padding
//
// The header is emitted with sorted keys, so equal checkpoints serialize to
// equal bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "consolidate/error.hpp"
#include "consolidate/io.hpp"
#include "consolidate/tensor.hpp"

namespace consolidate {

inline constexpr std::uint32_t kMrgfVersion = 1;
inline constexpr std::size_t kMrgfPreamble = 16;

enum class Role { weight, bias, head_weight, head_bias, lowrank_a, lowrank_b, inputs, labels };

inline constexpr std::string_view to_string(Role r) noexcept {
    switch (r) {
        case Role::weight: return "weight";
        case Role::bias: return "bias";
        case Role::head_weight: return "head_weight";
        case Role::head_bias: return "head_bias";
        case Role::lowrank_a: return "lowrank_a";
        case Role::lowrank_b: return "lowrank_b";
        case Role::inputs: return "inputs";
        case Role::labels: return "labels";
    }
    return "?";
}

inline Role parse_role(std::string_view s) {
    for (Role r : {Role::weight, Role::bias, Role::head_weight, Role::head_bias, Role::lowrank_a,
                   Role::lowrank_b, Role::inputs, Role::labels}) {
        if (to_string(r) == s) return r;
    }
    fail(ErrorCode::format, "unknown tensor role '" + std::string(s) + "'");
}

/// Roles that make up the dense network parameters.
inline constexpr bool is_dense_parameter(Role r) noexcept {
    return r == Role::weight || r == Role::bias || r == Role::head_weight || r == Role::head_bias;
}

inline constexpr bool is_weight_matrix(Role r) noexcept { return r == Role::weight || r == Role::head_weight; }

struct ManifestEntry {
    std::string name;
    Shape shape;
    Role role = Role::weight;
    int depth = 1;
    std::string target;  // lowrank_a / lowrank_b: the weight the factor adapts

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct LowRankConfig {
    std::size_t rank = 2;
    double alpha = 2.0;

    double scale() const noexcept { return alpha / static_cast<double>(rank); }
    friend bool operator==(const LowRankConfig&, const LowRankConfig&) = default;
};

struct Manifest {
    int layer_count = 1;
    std::vector<ManifestEntry> entries;
    std::optional<LowRankConfig> lowrank;

    const ManifestEntry* find(std::string_view name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    /// Entries holding dense network parameters, in manifest order.
    std::vector<ManifestEntry> dense_entries() const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (is_dense_parameter(e.role)) out.push_back(e);
        return out;
    }

    /// The manifest with low-rank factor entries removed.
    Manifest dense() const {
        Manifest m{layer_count, dense_entries(), std::nullopt};
        return m;
    }

    void validate() const {
        if (layer_count < 1) fail(ErrorCode::validation, "manifest layer_count must be positive");
        std::set<std::string> names;
        std::set<int> weight_depths;
        std::map<int, int> weights_at, biases_at;
        for (const auto& e : entries) {
            if (!names.insert(e.name).second) fail(ErrorCode::validation, "duplicate tensor name '" + e.name + "'");
            if (e.depth < 1 || e.depth > layer_count)
                fail(ErrorCode::validation, "tensor '" + e.name + "' has depth " + std::to_string(e.depth) +
                                                " outside [1, " + std::to_string(layer_count) + "]");
            if (e.shape.empty() || e.shape.size() > 2)
                fail(ErrorCode::validation, "tensor '" + e.name + "' must be rank 1 or 2");
            if (e.role == Role::weight) {
                weight_depths.insert(e.depth);
                ++weights_at[e.depth];
            }
            if (e.role == Role::bias) ++biases_at[e.depth];
        }
        for (auto [depth, count] : weights_at) {
            if (biases_at[depth] != count)
                fail(ErrorCode::validation, "weight at depth " + std::to_string(depth) + " has no matching bias");
        }
        if (!weight_depths.empty()) {
            for (int l = 1; l <= layer_count; ++l)
                if (!weight_depths.contains(l))
                    fail(ErrorCode::validation, "no weight at depth " + std::to_string(l));
        }
        for (const auto& e : entries) {
            if (e.role != Role::lowrank_a && e.role != Role::lowrank_b) continue;
            if (!lowrank) fail(ErrorCode::validation, "low-rank factor '" + e.name + "' without a lowrank config");
            const auto* t = find(e.target);
            if (!t || !is_weight_matrix(t->role))
                fail(ErrorCode::validation, "low-rank factor '" + e.name + "' targets unknown weight '" + e.target + "'");
            const Shape want = e.role == Role::lowrank_a ? Shape{lowrank->rank, t->shape[1]}
                                                         : Shape{t->shape[0], lowrank->rank};
            if (e.shape != want)
                fail(ErrorCode::validation, "low-rank factor '" + e.name + "' has shape " + shape_string(e.shape) +
                                                ", expected " + shape_string(want));
        }
    }

    friend bool operator==(const Manifest&, const Manifest&) = default;
};

enum class CheckpointKind { base, expert, merged, joint, dataset };

inline constexpr std::string_view to_string(CheckpointKind k) noexcept {
    switch (k) {
        case CheckpointKind::base: return "base";
        case CheckpointKind::expert: return "expert";
        case CheckpointKind::merged: return "merged";
        case CheckpointKind::joint: return "joint";
        case CheckpointKind::dataset: return "dataset";
    }
    return "?";
}

inline CheckpointKind parse_kind(std::string_view s) {
    for (auto k : {CheckpointKind::base, CheckpointKind::expert, CheckpointKind::merged, CheckpointKind::joint,
                   CheckpointKind::dataset})
        if (to_string(k) == s) return k;
    fail(ErrorCode::format, "unknown checkpoint kind '" + std::string(s) + "'");
}

struct Checkpoint {
    Manifest manifest;
    std::map<std::string, Tensor> tensors;
    CheckpointKind kind = CheckpointKind::base;
    std::string source_tag;

    const Tensor& at(std::string_view name) const {
        auto it = tensors.find(std::string(name));
        if (it == tensors.end()) fail(ErrorCode::validation, "missing tensor '" + std::string(name) + "'");
        return it->second;
    }

    bool is_lowrank() const noexcept { return manifest.lowrank.has_value(); }

    void validate() const {
        manifest.validate();
        if (tensors.size() != manifest.entries.size())
            fail(ErrorCode::validation, "checkpoint holds " + std::to_string(tensors.size()) +
                                            " tensors but the manifest lists " +
                                            std::to_string(manifest.entries.size()));
        for (const auto& e : manifest.entries) {
            auto it = tensors.find(e.name);
            if (it == tensors.end()) fail(ErrorCode::validation, "missing tensor '" + e.name + "'");
            if (it->second.shape() != e.shape)
                fail(ErrorCode::validation, "tensor '" + e.name + "' has shape " + shape_string(it->second.shape()) +
                                                ", manifest says " + shape_string(e.shape));
            if (!it->second.all_finite()) fail(ErrorCode::data, "tensor '" + e.name + "' has non-finite values");
        }
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline nlohmann::json manifest_to_json(const Manifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json j{{"name", e.name}, {"shape", e.shape}, {"role", to_string(e.role)}, {"depth", e.depth}};
        if (!e.target.empty()) j["target"] = e.target;
        entries.push_back(std::move(j));
    }
    nlohmann::json out{{"layer_count", m.layer_count}, {"entries", std::move(entries)}};
    if (m.lowrank) out["lowrank"] = {{"rank", m.lowrank->rank}, {"alpha", m.lowrank->alpha}};
    return out;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
    Manifest m;
    m.layer_count = j.at("layer_count").get<int>();
    for (const auto& e : j.at("entries")) {
        ManifestEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.shape = e.at("shape").get<Shape>();
        entry.role = parse_role(e.at("role").get<std::string>());
        entry.depth = e.at("depth").get<int>();
        if (e.contains("target")) entry.target = e.at("target").get<std::string>();
        m.entries.push_back(std::move(entry));
    }
    if (j.contains("lowrank")) {
        m.lowrank = LowRankConfig{j["lowrank"].at("rank").get<std::size_t>(), j["lowrank"].at("alpha").get<double>()};
    }
    return m;
}

template <typename T>
void put_le(std::string& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t offset) {
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        value |= static_cast<T>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    return value;
}

}  // namespace detail

/// Canonical MRGF bytes for a validated checkpoint.
inline std::string serialize_checkpoint(const Checkpoint& c) {
    c.validate();
    nlohmann::json order = nlohmann::json::array();
    for (const auto& e : c.manifest.entries) order.push_back(e.name);
    const nlohmann::json header{{"manifest", detail::manifest_to_json(c.manifest)},
                                {"kind", to_string(c.kind)},
                                {"source_tag", c.source_tag},
                                {"tensor_order", std::move(order)}};
    const std::string text = header.dump();

    std::string out = "MRGF";
    detail::put_le<std::uint32_t>(out, kMrgfVersion);
    detail::put_le<std::uint64_t>(out, text.size());
    out += text;
    for (const auto& e : c.manifest.entries) {
        for (float v : c.tensors.at(e.name).data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
    if (bytes.size() < 4) fail_at(ErrorCode::truncated, "file shorter than the magic bytes", 0);
    if (bytes.substr(0, 4) != "MRGF") fail_at(ErrorCode::magic, "bad magic bytes, expected \"MRGF\"", 0);
    if (bytes.size() < kMrgfPreamble) fail_at(ErrorCode::truncated, "file ends inside the preamble", bytes.size());
    const auto version = detail::get_le<std::uint32_t>(bytes, 4);
    if (version != kMrgfVersion)
        fail_at(ErrorCode::version, "unsupported format version " + std::to_string(version), 4);
    const auto header_len = detail::get_le<std::uint64_t>(bytes, 8);
    if (header_len > bytes.size() - kMrgfPreamble)
        fail_at(ErrorCode::truncated, "header of " + std::to_string(header_len) + " bytes runs past end of file",
                kMrgfPreamble);

    Checkpoint c;
    std::vector<std::string> order;
    try {
        const auto header = nlohmann::json::parse(bytes.substr(kMrgfPreamble, header_len));
        c.manifest = detail::manifest_from_json(header.at("manifest"));
        c.kind = parse_kind(header.at("kind").get<std::string>());
        c.source_tag = header.at("source_tag").get<std::string>();
        order = header.at("tensor_order").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& ex) {
        fail_at(ErrorCode::format, std::string("malformed header: ") + ex.what(), kMrgfPreamble);
    }

    if (order.size() != c.manifest.entries.size())
        fail_at(ErrorCode::length, "tensor_order lists " + std::to_string(order.size()) + " tensors, manifest has " +
                                       std::to_string(c.manifest.entries.size()),
                kMrgfPreamble);

    std::size_t offset = kMrgfPreamble + header_len;
    for (const auto& name : order) {
        const auto* entry = c.manifest.find(name);
        if (!entry) fail_at(ErrorCode::length, "tensor_order names unknown tensor '" + name + "'", kMrgfPreamble);
        const std::size_t count = shape_size(entry->shape);
        const std::size_t need = count * sizeof(float);
        if (bytes.size() - offset < need)
            fail_at(ErrorCode::truncated, "payload for tensor '" + name + "' truncated: needs " +
                                              std::to_string(need) + " bytes, " +
                                              std::to_string(bytes.size() - offset) + " remain",
                    offset);
        std::vector<float> data(count);
        for (std::size_t i = 0; i < count; ++i)
            data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, offset + 4 * i));
        c.tensors.emplace(name, Tensor(entry->shape, std::move(data)));
        offset += need;
    }
    if (offset != bytes.size())
        fail_at(ErrorCode::length, std::to_string(bytes.size() - offset) + " trailing bytes after the payload",
                offset);
    try {
        c.validate();
    } catch (const Error& e) {
        fail_at(e.code(), e.what(), kMrgfPreamble);
    }
    return c;
}

inline void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    atomic_write(path, serialize_checkpoint(c));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    try {
        return deserialize_checkpoint(bytes);
    } catch (const Error& e) {
        throw Error(e.code(), path.string() + ": " + e.what(), e.offset());
    }
}

/// Passes iff every expert carries the base's dense architecture (names,
/// shapes, roles, depths). Low-rank factor entries are adapters on top of that
/// architecture and are not compared.
inline void validate_compatible(const Checkpoint& base, std::span<const Checkpoint> experts) {
    const auto reference = base.manifest.dense_entries();
    for (std::size_t i = 0; i < experts.size(); ++i) {
        const auto& ex = experts[i];
        const std::string who = "expert " + std::to_string(i) +
                                (ex.source_tag.empty() ? "" : " ('" + ex.source_tag + "')");
        if (ex.manifest.layer_count != base.manifest.layer_count)
            fail(ErrorCode::incompatible, who + " has layer_count " + std::to_string(ex.manifest.layer_count));
        const auto theirs = ex.manifest.dense_entries();
        for (const auto& e : reference) {
            const auto* o = ex.manifest.find(e.name);
            if (!o) fail(ErrorCode::incompatible, who + " is missing tensor '" + e.name + "'");
            if (o->shape != e.shape)
                fail(ErrorCode::incompatible, who + " tensor '" + e.name + "' has shape " + shape_string(o->shape) +
                                                  ", base has " + shape_string(e.shape));
            if (o->role != e.role || o->depth != e.depth)
                fail(ErrorCode::incompatible, who + " tensor '" + e.name + "' differs in role or depth");
        }
        for (const auto& o : theirs) {
            if (!base.manifest.find(o.name))
                fail(ErrorCode::incompatible, who + " has extra tensor '" + o.name + "'");
        }
    }
}

}  // namespace consolidate

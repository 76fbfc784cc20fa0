#pragma once

// Single-file container for parameters and cohorts.
//
// Layout:
//   "TTRX\n"
//   "format_version = 1\n"
//   "header_bytes = <n>\n"       length of the key/value block that follows
//   <key/value block>           "key = value\n" lines, sorted by key
//   <payload>                   little-endian float64 arrays, back to back
//
// Each array is declared in the block as
//   array.<index>.name  = <name>
//   array.<index>.shape = <d0>x<d1>x...
//   array.<index>.offset = <first element in the payload>
// and the block carries payload_elements and a git-style SHA-1 of the
// payload (provenance.content_digest), verified on load.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ttrx/model.hpp"
#include "ttrx/synthdata.hpp"
#include "ttrx/tensor.hpp"

namespace ttrx {

inline constexpr std::string_view kContainerMagic = "TTRX";
inline constexpr int kContainerVersion = 1;

struct Container {
    std::map<std::string, std::string> meta;
    std::vector<NamedTensor> arrays;

    void put(std::string name, Tensor t);
    const Tensor& get(std::string_view name) const;
    bool has(std::string_view name) const;
    const std::string& value(const std::string& key) const;
};

std::string serialize_container(const Container& c);
Container parse_container(std::string_view bytes);

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

/// SHA-1 of "blob <size>\0" + bytes, hex encoded (what `git hash-object` prints).
std::string git_blob_sha1(std::string_view bytes);
std::string sha1_hex(std::string_view bytes);

// ---- model and cohort checkpoints ------------------------------------------

struct ModelCheckpoint {
    SegmentationModel model;
    LabelSet labels = LabelSet::Existing;
    std::string config_hash;
    std::uint64_t seed = 0;
};

Container to_container(const ModelCheckpoint& ckpt);
ModelCheckpoint model_from_container(const Container& c);

Container to_container(const Cohort& cohort, const std::string& config_hash);
Cohort cohort_from_container(const Container& c);

}  // namespace ttrx

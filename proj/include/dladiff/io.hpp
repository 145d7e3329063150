#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dladiff/tensor.hpp"

namespace dladiff {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Named-tensor container shared by diffusion and encoder checkpoints.
///
/// On-disk layout (all integers little-endian):
///   "DLADCKPT"                       8-byte magic
///   u32 schema_version               currently 1
///   u32 n_meta, then n_meta x { u32 len, key bytes, u32 len, value bytes }
///   u32 n_tensors, then n_tensors x { u32 len, name bytes, u32 ndim,
///                                     i32 dims[ndim], f64 data[prod(dims)] }
/// Entries are written in key order, so equal contents give equal bytes.
struct Checkpoint {
    static constexpr std::uint32_t kSchemaVersion = 1;
    std::map<std::string, std::string> meta;
    std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Ordered "key = value" text records; '#' starts a comment line.
class KeyValueText {
public:
    void set(const std::string& key, const std::string& value);
    void set(const std::string& key, double value);
    void set(const std::string& key, long long value);
    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    std::string str() const;
    static KeyValueText parse(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static KeyValueText load(const std::filesystem::path& path);

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

/// Round-trippable decimal for a double (17 significant digits).
std::string format_double(double v);

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
/// Hex FNV-1a digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);
std::string to_hex(std::uint64_t v);

}  // namespace dladiff

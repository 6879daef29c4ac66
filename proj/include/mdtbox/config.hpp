#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace mdtbox {

// Flat key=value run configuration. Ordered map so serialization is canonical
// and the hash is stable.
using KvConfig = std::map<std::string, std::string>;

KvConfig parse_kv_text(const std::string& text);
KvConfig parse_kv_file(const std::filesystem::path& path);
std::string serialize_kv(const KvConfig& kv);
void write_kv_file(const std::filesystem::path& path, const KvConfig& kv);

// FNV-1a over the canonical serialization.
uint64_t config_hash(const KvConfig& kv);
std::string config_hash_hex(const KvConfig& kv);

} // namespace mdtbox

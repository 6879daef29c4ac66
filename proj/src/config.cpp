#include "mdtbox/config.hpp"

#include <fstream>
#include <sstream>

#include "mdtbox/errors.hpp"

namespace mdtbox {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

KvConfig parse_kv_text(const std::string& text) {
    KvConfig kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " has no '='");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw ConfigError("duplicate config key " + key);
        kv[key] = val;
    }
    return kv;
}

KvConfig parse_kv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_kv_text(ss.str());
}

std::string serialize_kv(const KvConfig& kv) {
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

void write_kv_file(const std::filesystem::path& path, const KvConfig& kv) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file " + path.string());
    out << serialize_kv(kv);
}

uint64_t config_hash(const KvConfig& kv) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [k, v] : kv) {
        for (std::string_view part : {std::string_view(k), std::string_view("="),
                                      std::string_view(v), std::string_view("\n")}) {
            for (char c : part) {
                h ^= static_cast<unsigned char>(c);
                h *= 1099511628211ull;
            }
        }
    }
    return h;
}

std::string config_hash_hex(const KvConfig& kv) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(config_hash(kv)));
    return std::string(buf);
}

} // namespace mdtbox

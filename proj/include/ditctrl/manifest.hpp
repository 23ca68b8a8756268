#pragma once

#include <algorithm>
#include <cstdio>
#include <type_traits>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ditctrl/error.hpp"
#include "ditctrl/tensor_io.hpp"

namespace ditctrl {

// Run manifest: UTF-8 text, one "key = value" per line, keys in lexicographic order.
// Values never contain newlines. Reserved key families:
//   manifest_version   format version (1)
//   command            CLI subcommand that produced the run
//   config             resolved run configuration as compact JSON
//   seed               effective initial-noise seed
//   layout.*           segment layout
//   toggles.*          active mechanisms; ablation.row names the ablation configuration
//   digest.<file>      FNV-1a 64 (hex) of every output file in the run directory
class Manifest {
public:
    void set(const std::string& key, std::string value) {
        require(value.find('\n') == std::string::npos, ErrorKind::Invalid, "manifest values must be single-line");
        entries_[key] = std::move(value);
    }
    void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }
    void set(const std::string& key, const char* value) { set(key, std::string(value)); }
    template <typename N>
        requires std::is_arithmetic_v<N>
    void set(const std::string& key, N value) {
        if constexpr (std::is_floating_point_v<N>) {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(value));
            set(key, std::string(buf));
        } else {
            set(key, std::to_string(value));
        }
    }

    // Adds digest.<name> for every regular file in `dir` except the manifest itself.
    void digest_directory(const std::filesystem::path& dir, const std::string& manifest_name = "manifest.txt") {
        std::vector<std::string> names;
        for (const auto& e : std::filesystem::directory_iterator(dir))
            if (e.is_regular_file() && e.path().filename() != manifest_name) names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        for (const auto& n : names) set("digest." + n, file_digest(dir / n));
    }

    const std::map<std::string, std::string>& entries() const { return entries_; }
    const std::string& at(const std::string& key) const {
        auto it = entries_.find(key);
        require(it != entries_.end(), ErrorKind::Invalid, "manifest has no key '" + key + "'");
        return it->second;
    }
    bool contains(const std::string& key) const { return entries_.count(key) > 0; }

    std::string text() const {
        std::string out;
        for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
        return out;
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
        out << text();
    }

    static Manifest read(const std::filesystem::path& path) {
        std::ifstream in(path);
        require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
        Manifest m;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto eq = line.find(" = ");
            require(eq != std::string::npos, ErrorKind::Io, "malformed manifest line: " + line);
            m.entries_[line.substr(0, eq)] = line.substr(eq + 3);
        }
        return m;
    }

    friend bool operator==(const Manifest&, const Manifest&) = default;

private:
    std::map<std::string, std::string> entries_;
};

} // namespace ditctrl

#include "ragdiff/config.hpp"

#include "ragdiff/error.hpp"

#include <fstream>
#include <sstream>

namespace ragdiff {

namespace {
std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}
}  // namespace

Config Config::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise_missing("config file not found: " + path);
    Config cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            raise_usage("config " + path + ":" + std::to_string(lineno) + ": expected key=value");
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

std::string Config::get_str(const std::string& key, const std::string& def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
}

int64_t Config::get_int(const std::string& key, int64_t def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        size_t pos = 0;
        int64_t v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        raise_usage("config key '" + key + "' is not an integer: " + it->second);
    }
}

double Config::get_real(const std::string& key, double def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        size_t pos = 0;
        double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        raise_usage("config key '" + key + "' is not a number: " + it->second);
    }
}

bool Config::get_bool(const std::string& key, bool def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    raise_usage("config key '" + key + "' is not a boolean: " + v);
}

void Config::validate_keys(const std::set<std::string>& allowed) const {
    for (const auto& [k, v] : kv_)
        if (!allowed.count(k)) raise_usage("unknown config key: " + k);
}

void Config::echo(const std::string& path) const {
    std::ofstream out(path);
    if (!out) raise_data("cannot write config echo: " + path);
    for (const auto& [k, v] : kv_) out << k << "=" << v << "\n";
}

}  // namespace ragdiff

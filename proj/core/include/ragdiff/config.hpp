#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>

namespace ragdiff {

/// Flat key=value configuration. Files use one `key=value` per line with
/// '#' comments; CLI flags override file values. Keys outside the allowed
/// set are rejected.
class Config {
  public:
    Config() = default;

    static Config from_file(const std::string& path);

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& def) const;
    int64_t get_int(const std::string& key, int64_t def) const;
    double get_real(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;

    /// Throws kUsageError if any key is not in `allowed`.
    void validate_keys(const std::set<std::string>& allowed) const;

    /// Writes the effective key=value state, sorted by key.
    void echo(const std::string& path) const;

    const std::map<std::string, std::string>& items() const { return kv_; }

  private:
    std::map<std::string, std::string> kv_;
};

}  // namespace ragdiff

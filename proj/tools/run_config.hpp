#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace dverge::cli {

using Json = nlohmann::json;

/// Invalid configuration value, reported with its JSON pointer.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string path, const std::string& message)
        : std::runtime_error(message), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

/// Requested checkpoint directory is missing or unreadable.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Every key with its default. The defaults double as the schema: a config
/// may only contain keys that appear here.
Json default_config();

/// A flag value bound to a JSON pointer, applied after the config file.
struct Override {
    std::string pointer;
    std::string value;
};

/// defaults <- config file <- overrides (in order), then derived values
/// (null step sizes) are filled in. Throws ConfigError.
Json resolve_config(const std::string& config_path, const std::vector<Override>& overrides);

/// Parses a flag value: JSON when it parses, otherwise a string. When the
/// default at the pointer is an array, a bare comma list is accepted.
Json parse_flag_value(const Json& defaults_at, const std::string& text);

/// Typed, path-checked access to the resolved config.
class Reader {
public:
    explicit Reader(const Json& root) : root_(root) {}

    const Json& at(const std::string& pointer) const;
    double number(const std::string& pointer) const;
    double positive(const std::string& pointer) const;
    double non_negative(const std::string& pointer) const;
    double in_range(const std::string& pointer, double lo, double hi) const;
    std::uint64_t uint(const std::string& pointer) const;
    std::size_t count(const std::string& pointer, std::size_t min = 0) const;
    bool flag(const std::string& pointer) const;
    std::string string(const std::string& pointer) const;
    std::string choice(const std::string& pointer, const std::vector<std::string>& options) const;
    std::vector<double> numbers(const std::string& pointer) const;
    std::vector<std::size_t> counts(const std::string& pointer) const;
    std::vector<std::string> strings(const std::string& pointer) const;

private:
    const Json& root_;
};

}  // namespace dverge::cli

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace rawformer::cli {

enum class KeyType { integer, real, boolean, text, choice };

struct KeySpec {
  std::string name;
  KeyType type;
  std::string default_value;
  std::string doc;
  double min = 0, max = 0;  // inclusive, numeric keys only
  std::vector<std::string> choices;
};

/// Every accepted key, in display order.
const std::vector<KeySpec>& config_schema();
const KeySpec* find_key(const std::string& name);

/// Validated key -> value map. Getters throw ConfigError on unknown keys.
class RunConfig {
 public:
  std::int64_t integer(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;
  const std::string& text(const std::string& key) const;

  /// Checks and stores one value; ConfigError naming the key on failure.
  void set(const std::string& key, const std::string& value);
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  /// `key = value` lines in schema order, each preceded by its doc comment.
  std::string dump() const;

  static RunConfig defaults();

 private:
  std::map<std::string, std::string> values_;
};

/// Keys applied between the defaults and the config file by `--paper-scale`.
const std::vector<std::pair<std::string, std::string>>& paper_scale_preset();

/// defaults <- preset <- file <- flags. The file holds `key = value` lines
/// with `#` comments.
RunConfig parse_config(const std::optional<std::filesystem::path>& file,
                       const std::vector<std::pair<std::string, std::string>>& flags, bool paper_scale = false);

/// Parses the text of a config file into (key, value) pairs without
/// validating keys. ConfigError with the line number on malformed lines.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

/// Comma-separated list, empty items dropped.
std::vector<std::string> split_list(const std::string& s);

}  // namespace rawformer::cli

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace esrie::cli {

struct KeySpec {
  std::string name;  ///< underscore form
  std::string fallback;
  std::string help;
};

/// Resolved `key = value` settings of one command. Layers, lowest first:
/// key defaults, the config file, command-line overrides.
class RunConfig {
 public:
  RunConfig(std::string command, std::vector<KeySpec> keys);

  const std::string& command() const { return command_; }
  const std::vector<KeySpec>& keys() const { return keys_; }

  /// Throws UnknownKey for keys outside the command's table.
  void set(std::string_view key, std::string value);
  /// `key = value` lines; `#` starts a comment.
  void merge_text(std::string_view text, std::string_view origin);
  void merge_file(const std::filesystem::path& path);

  bool has(std::string_view key) const;
  const std::string& str(std::string_view key) const;
  long long integer(std::string_view key) const;
  std::uint64_t u64(std::string_view key) const;
  double real(std::string_view key) const;
  bool flag(std::string_view key) const;
  std::vector<std::string> list(std::string_view key) const;
  std::vector<int> int_list(std::string_view key) const;

  /// Sorted `key = value` lines, loadable with merge_text.
  std::string render() const;
  /// FNV-1a over the rendered config minus `threads` and `out_dir`, which do
  /// not change results or are the destination itself.
  std::uint64_t fingerprint() const;
  /// out_dir / "<command>-<16 hex digits>".
  std::filesystem::path run_dir() const;

 private:
  std::string command_;
  std::vector<KeySpec> keys_;
  std::map<std::string, std::string, std::less<>> values_;
};

/// Hyphens become underscores.
std::string normalize_key(std::string_view key);

std::uint64_t fnv1a(std::string_view bytes);

}  // namespace esrie::cli

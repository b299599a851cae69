#include "run_config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "esrie/error.hpp"
#include "esrie/image_io.hpp"

namespace esrie::cli {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw Error(ErrorCode::InvalidConfig,
              "key '" + std::string(key) + "' expects " + std::string(want) + ", got '" + std::string(value) + "'");
}

template <typename T>
T parse_number(std::string_view key, std::string_view text, std::string_view want) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (text.empty() || r.ec != std::errc{} || r.ptr != end) bad_value(key, text, want);
  return v;
}

}  // namespace

std::string normalize_key(std::string_view key) {
  std::string out(key);
  std::replace(out.begin(), out.end(), '-', '_');
  return out;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RunConfig::RunConfig(std::string command, std::vector<KeySpec> keys) : command_(std::move(command)), keys_(std::move(keys)) {
  for (const auto& k : keys_) values_[k.name] = k.fallback;
}

void RunConfig::set(std::string_view key, std::string value) {
  const std::string k = normalize_key(key);
  const auto it = values_.find(k);
  if (it == values_.end()) throw Error(ErrorCode::UnknownKey, "'" + k + "' is not a key of '" + command_ + "'");
  it->second = std::move(value);
}

void RunConfig::merge_text(std::string_view text, std::string_view origin) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw Error(ErrorCode::InvalidConfig, std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
    try {
      set(trim(line.substr(0, eq)), std::string(trim(line.substr(eq + 1))));
    } catch (const Error& e) {
      throw Error(e.code(), std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  merge_text(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path.string());
}

bool RunConfig::has(std::string_view key) const { return !str(key).empty(); }

const std::string& RunConfig::str(std::string_view key) const {
  const auto it = values_.find(normalize_key(key));
  if (it == values_.end()) throw Error(ErrorCode::UnknownKey, "'" + std::string(key) + "' is not a key of '" + command_ + "'");
  return it->second;
}

long long RunConfig::integer(std::string_view key) const { return parse_number<long long>(key, str(key), "an integer"); }

std::uint64_t RunConfig::u64(std::string_view key) const {
  return parse_number<std::uint64_t>(key, str(key), "an unsigned integer");
}

double RunConfig::real(std::string_view key) const { return parse_number<double>(key, str(key), "a number"); }

bool RunConfig::flag(std::string_view key) const {
  const auto& v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::string> RunConfig::list(std::string_view key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::vector<int> RunConfig::int_list(std::string_view key) const {
  std::vector<int> out;
  for (const auto& s : list(key)) out.push_back(parse_number<int>(key, s, "a list of integers"));
  return out;
}

std::string RunConfig::render() const {
  std::string out = "# esrie " + command_ + "\n";
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t RunConfig::fingerprint() const {
  std::string text = command_ + "\n";
  for (const auto& [k, v] : values_)
    if (k != "threads" && k != "out_dir") text += k + "=" + v + "\n";
  return fnv1a(text);
}

std::filesystem::path RunConfig::run_dir() const {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fingerprint()));
  return std::filesystem::path(str("out_dir")) / (command_ + "-" + hex);
}

}  // namespace esrie::cli

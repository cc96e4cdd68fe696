#include "cadlab/config_file.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cadlab/errors.hpp"

namespace cadlab {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  T out{};
  const char* begin = raw.data();
  const char* end = raw.data() + raw.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError("config: key '" + key + "' has invalid value '" +
                          raw + "'");
  }
  return out;
}

}  // namespace

KeyValueDoc KeyValueDoc::parse(std::string_view text) {
  KeyValueDoc doc;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError("config: line " + std::to_string(line_no) +
                            " is not of the form key = value");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) {
      throw ValidationError("config: line " + std::to_string(line_no) +
                            " has an empty key");
    }
    doc.values_[key] = std::string(trim(line.substr(eq + 1)));
  }
  return doc;
}

KeyValueDoc KeyValueDoc::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("config: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void KeyValueDoc::set(const std::string& key, std::string value) {
  values_[key] = std::move(value);
}

std::string KeyValueDoc::get_string(const std::string& key,
                                    std::string fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValueDoc::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : parse_number<double>(key, it->second);
}

std::int64_t KeyValueDoc::get_int(const std::string& key,
                                  std::int64_t fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback
                             : parse_number<std::int64_t>(key, it->second);
}

std::uint64_t KeyValueDoc::get_uint(const std::string& key,
                                    std::uint64_t fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback
                             : parse_number<std::uint64_t>(key, it->second);
}

bool KeyValueDoc::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config: key '" + key + "' expects a boolean, got '" +
                        v + "'");
}

void KeyValueDoc::require_known(const std::set<std::string>& allowed) const {
  for (const auto& [key, value] : values_) {
    if (!allowed.count(key)) {
      throw ValidationError("config: unknown key '" + key + "'");
    }
  }
}

std::string KeyValueDoc::canonical() const {
  std::string out;
  for (const auto& [key, value] : values_) {
    out += key;
    out += '=';
    out += value;
    out += '\n';
  }
  return out;
}

std::string fingerprint(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::int64_t> parse_int_list(std::string_view csv) {
  std::vector<std::int64_t> out;
  while (!csv.empty()) {
    const auto comma = csv.find(',');
    const std::string item(trim(csv.substr(0, comma)));
    csv = comma == std::string_view::npos ? std::string_view{} : csv.substr(comma + 1);
    if (item.empty()) continue;
    out.push_back(parse_number<std::int64_t>("list", item));
  }
  return out;
}

}  // namespace cadlab

#include "mddn/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "mddn/errors.hpp"

namespace mddn {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
  return out;
}

bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects on/off, got '" + v + "'");
}

}  // namespace

BranchSet::BranchSet(std::vector<int> levels) : levels_(std::move(levels)) {
  std::sort(levels_.begin(), levels_.end());
  levels_.erase(std::unique(levels_.begin(), levels_.end()), levels_.end());
  if (levels_.empty()) throw ConfigError("branch set must not be empty");
  if (levels_.front() < 1) throw ConfigError("branch levels must be >= 1");
}

BranchSet BranchSet::parse(std::string_view text) {
  std::vector<int> levels;
  std::string item;
  std::istringstream is{std::string(text)};
  while (std::getline(is, item, ',')) {
    const std::string t = trim(item);
    int v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
      throw ConfigError("malformed branch set '" + std::string(text) + "'");
    levels.push_back(v);
  }
  return BranchSet(std::move(levels));
}

bool BranchSet::contains(int level) const {
  return std::binary_search(levels_.begin(), levels_.end(), level);
}

std::string BranchSet::str() const {
  std::string s;
  for (std::size_t i = 0; i < levels_.size(); ++i) s += (i ? "," : "") + std::to_string(levels_[i]);
  return s;
}

std::string fusion_name(Fusion f) { return f == Fusion::mff ? "mff" : "addition"; }

void ModelConfig::validate() const {
  if (channels == 0) throw ConfigError("channels must be >= 1");
  if (heads == 0 || channels % heads != 0)
    throw ConfigError("channels (" + std::to_string(channels) + ") not divisible by heads (" +
                      std::to_string(heads) + ")");
  if (rank == 0) throw ConfigError("rank must be >= 1");
  if (n_blocks > 0 && n_layers == 0) throw ConfigError("n_layers must be >= 1");
  if (window == 0) throw ConfigError("window must be >= 1");
  if (offset_width == 0) throw ConfigError("offset_width must be >= 1");
  if (scale == 0 || (scale & (scale - 1)) != 0) throw ConfigError("scale must be a power of 2");
  if (branches.size() == 0) throw ConfigError("branch set must not be empty");
}

std::size_t ModelConfig::upsample_stages() const {
  std::size_t n = 0;
  for (std::size_t s = scale; s > 1; s >>= 1) ++n;
  return n;
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "channels = " << channels << '\n'
     << "n_blocks = " << n_blocks << '\n'
     << "n_layers = " << n_layers << '\n'
     << "rank = " << rank << '\n'
     << "branches = " << branches.str() << '\n'
     << "window = " << window << '\n'
     << "heads = " << heads << '\n'
     << "scale = " << scale << '\n'
     << "ffn = " << (ffn ? "on" : "off") << '\n'
     << "fusion = " << fusion_name(fusion) << '\n'
     << "offset_width = " << offset_width << '\n'
     << "zero_init = " << (zero_init ? "on" : "off") << '\n';
  return os.str();
}

ModelConfig tiny_preset() {
  ModelConfig c;
  c.channels = 32;
  c.n_blocks = 2;
  c.n_layers = 2;
  c.window = 4;
  c.heads = 4;
  c.scale = 2;
  c.offset_width = 32;
  return c;
}

ModelConfig paper_preset() { return ModelConfig{}; }

bool apply_model_key(ModelConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "channels") cfg.channels = parse_size(key, value);
  else if (key == "n_blocks") cfg.n_blocks = parse_size(key, value);
  else if (key == "n_layers") cfg.n_layers = parse_size(key, value);
  else if (key == "rank") cfg.rank = parse_size(key, value);
  else if (key == "branches") cfg.branches = BranchSet::parse(value);
  else if (key == "window") cfg.window = parse_size(key, value);
  else if (key == "heads") cfg.heads = parse_size(key, value);
  else if (key == "scale") cfg.scale = parse_size(key, value);
  else if (key == "ffn") cfg.ffn = parse_switch(key, value);
  else if (key == "fusion") {
    if (value == "mff") cfg.fusion = Fusion::mff;
    else if (value == "addition") cfg.fusion = Fusion::addition;
    else throw ConfigError("config: fusion must be mff or addition, got '" + value + "'");
  } else if (key == "offset_width") cfg.offset_width = parse_size(key, value);
  else if (key == "zero_init") cfg.zero_init = parse_switch(key, value);
  else return false;
  return true;
}

std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

ModelConfig parse_model_config(std::string_view text, std::map<std::string, std::string>* extra) {
  ModelConfig cfg;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (apply_model_key(cfg, key, value)) continue;
    if (!extra) throw ConfigError("config: unknown key '" + key + "'");
    (*extra)[key] = value;
  }
  cfg.validate();
  return cfg;
}

}  // namespace mddn

#include "gdkvm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <stdexcept>

#include "gdkvm/csv.hpp"

namespace gdkvm {

std::map<std::string, std::string> parse_key_values(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key(trim(s.substr(0, eq)));
    const std::string value(trim(s.substr(eq + 1)));
    if (key.empty() || value.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key or value");
    if (!kv.emplace(key, value).second) throw std::invalid_argument("config line " + std::to_string(lineno) + ": duplicate key " + key);
  }
  return kv;
}

bool parse_bool(const std::string& s) {
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw std::invalid_argument("expected on/off, got '" + s + "'");
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw std::invalid_argument("config " + key + ": cannot parse '" + s + "'");
  }
  return v;
}

}  // namespace

void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto size = [](std::size_t& dst) -> Setter { return [&dst](auto& k, auto& v) { dst = parse_number<std::size_t>(k, v); }; };
  auto u64 = [](std::uint64_t& dst) -> Setter { return [&dst](auto& k, auto& v) { dst = parse_number<std::uint64_t>(k, v); }; };
  auto real = [](double& dst) -> Setter { return [&dst](auto& k, auto& v) { dst = parse_number<double>(k, v); }; };
  auto flag = [](bool& dst) -> Setter { return [&dst](auto&, auto& v) { dst = parse_bool(v); }; };

  const std::map<std::string, Setter> setters{
      {"steps", size(cfg.steps)},
      {"batch", size(cfg.batch)},
      {"lr", real(cfg.optimizer.lr)},
      {"weight_decay", real(cfg.optimizer.weight_decay)},
      {"clip", real(cfg.clip)},
      {"augment", flag(cfg.augment)},
      {"eval_every", size(cfg.eval_every)},
      {"eval_videos", size(cfg.eval_videos)},
      {"eval_seed", u64(cfg.eval_seed)},
      {"seed", u64(cfg.seed)},
      {"seeds",
       [&cfg](auto& k, auto& v) {
         cfg.seeds.clear();
         for (const auto& part : split(v, ',')) cfg.seeds.push_back(parse_number<std::uint64_t>(k, std::string(trim(part))));
       }},
      {"frames", size(cfg.data.frames)},
      {"size",
       [&cfg](auto& k, auto& v) {
         cfg.data.size = parse_number<std::size_t>(k, v);
         cfg.data.center_x = cfg.data.center_y = (static_cast<double>(cfg.data.size) - 1) / 2;
       }},
      {"axis_a", real(cfg.data.axis_a)},
      {"axis_b", real(cfg.data.axis_b)},
      {"amplitude", real(cfg.data.amplitude)},
      {"period", real(cfg.data.period)},
      {"speckle", real(cfg.data.speckle)},
      {"key_dim", size(cfg.model.key_dim)},
      {"value_dim", size(cfg.model.value_dim)},
      {"hidden", size(cfg.model.hidden)},
      {"decoder_hidden", size(cfg.model.decoder_hidden)},
      {"strategy",
       [&cfg](auto& k, auto& v) {
         const auto s = parse_strategy(v);
         if (!s) throw std::invalid_argument("config " + k + ": unknown strategy '" + v + "'");
         cfg.model.strategy = *s;
       }},
      {"kpff", flag(cfg.model.kpff)},
      {"normalize", flag(cfg.model.normalize)},
  };
  for (const auto& [key, value] : kv) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    it->second(key, value);
  }
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config " + path.string());
  TrainConfig cfg;
  apply_config(cfg, parse_key_values(is));
  return cfg;
}

}  // namespace gdkvm

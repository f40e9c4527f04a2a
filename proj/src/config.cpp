#include "weightflow/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "weightflow/errors.hpp"

namespace wf {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

TomlScalar parse_scalar(const std::string& tok, std::size_t line_no) {
  if (tok.empty()) throw config_error("config line " + std::to_string(line_no) + ": empty value");
  if (tok == "true") return true;
  if (tok == "false") return false;
  if (tok.front() == '"') {
    if (tok.size() < 2 || tok.back() != '"')
      throw config_error("config line " + std::to_string(line_no) + ": unterminated string");
    return tok.substr(1, tok.size() - 2);
  }
  // integer first, then float
  std::int64_t iv = 0;
  auto [ip, iec] = std::from_chars(tok.data(), tok.data() + tok.size(), iv);
  if (iec == std::errc() && ip == tok.data() + tok.size()) return iv;
  try {
    std::size_t used = 0;
    double dv = std::stod(tok, &used);
    if (used == tok.size()) return dv;
  } catch (...) {
  }
  throw config_error("config line " + std::to_string(line_no) + ": cannot parse value '" + tok +
                     "'");
}

// Splits a bracketed array body on commas; quoted strings may contain commas.
std::vector<std::string> split_array(const std::string& body, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool in_str = false;
  for (char ch : body) {
    if (ch == '"') in_str = !in_str;
    if (ch == ',' && !in_str) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (in_str) throw config_error("config line " + std::to_string(line_no) + ": unterminated string");
  std::string last = trim(cur);
  if (!last.empty()) out.push_back(last);
  return out;
}

}  // namespace

TomlTable parse_toml(const std::string& text) {
  TomlTable table;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    // strip comments outside strings
    std::string stripped;
    bool in_str = false;
    for (char ch : raw) {
      if (ch == '"') in_str = !in_str;
      if (ch == '#' && !in_str) break;
      stripped += ch;
    }
    std::string line = trim(stripped);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw config_error("config line " + std::to_string(line_no) + ": malformed section");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw config_error("config line " + std::to_string(line_no) + ": empty section name");
      table[section];
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw config_error("config line " + std::to_string(line_no) + ": empty key");
    TomlValue tv;
    if (!val.empty() && val.front() == '[') {
      if (val.back() != ']')
        throw config_error("config line " + std::to_string(line_no) + ": unterminated array");
      tv.is_array = true;
      for (const std::string& tok : split_array(val.substr(1, val.size() - 2), line_no))
        tv.items.push_back(parse_scalar(tok, line_no));
    } else {
      tv.items.push_back(parse_scalar(val, line_no));
    }
    if (!table[section].emplace(key, std::move(tv)).second)
      throw config_error("config line " + std::to_string(line_no) + ": duplicate key '" + key +
                         "'");
  }
  return table;
}

namespace {

// Typed accessors over one section; every key must be consumed.
struct Section {
  const std::string name;
  std::map<std::string, TomlValue> kv;

  bool has(const std::string& k) const { return kv.count(k) != 0; }

  TomlValue take(const std::string& k) {
    auto it = kv.find(k);
    TomlValue v = std::move(it->second);
    kv.erase(it);
    return v;
  }

  double number(const TomlScalar& s, const std::string& k) const {
    if (std::holds_alternative<std::int64_t>(s))
      return static_cast<double>(std::get<std::int64_t>(s));
    if (std::holds_alternative<double>(s)) return std::get<double>(s);
    throw config_error("config [" + name + "]." + k + ": expected a number");
  }

  void get(const std::string& k, double& out) {
    if (!has(k)) return;
    TomlValue v = take(k);
    if (v.is_array) throw config_error("config [" + name + "]." + k + ": expected a scalar");
    out = number(v.items[0], k);
  }
  void get(const std::string& k, std::size_t& out) {
    double d = -1.0;
    bool present = has(k);
    get(k, d);
    if (!present) return;
    if (d < 0.0 || d != std::floor(d))
      throw config_error("config [" + name + "]." + k + ": expected a non-negative integer");
    out = static_cast<std::size_t>(d);
  }
  void get(const std::string& k, int& out) {
    double d = 0.0;
    bool present = has(k);
    get(k, d);
    if (present) out = static_cast<int>(d);
  }
  void get(const std::string& k, bool& out) {
    if (!has(k)) return;
    TomlValue v = take(k);
    if (v.is_array || !std::holds_alternative<bool>(v.items[0]))
      throw config_error("config [" + name + "]." + k + ": expected true/false");
    out = std::get<bool>(v.items[0]);
  }
  void get(const std::string& k, std::string& out) {
    if (!has(k)) return;
    TomlValue v = take(k);
    if (v.is_array || !std::holds_alternative<std::string>(v.items[0]))
      throw config_error("config [" + name + "]." + k + ": expected a string");
    out = std::get<std::string>(v.items[0]);
  }
  void get(const std::string& k, std::vector<std::size_t>& out) {
    if (!has(k)) return;
    TomlValue v = take(k);
    if (!v.is_array) throw config_error("config [" + name + "]." + k + ": expected an array");
    out.clear();
    for (const TomlScalar& s : v.items) {
      double d = number(s, k);
      if (d < 0.0 || d != std::floor(d))
        throw config_error("config [" + name + "]." + k + ": expected integers");
      out.push_back(static_cast<std::size_t>(d));
    }
  }

  void finish() const {
    if (!kv.empty())
      throw config_error("config [" + name + "]: unknown key '" + kv.begin()->first + "'");
  }
};

OptimState make_optim(const std::string& name, double lr) {
  if (name == "sgd") return OptimState::sgd(lr);
  if (name == "adamw") return OptimState::adamw(lr);
  throw config_error("config [base].optimizer: expected sgd or adamw, got '" + name + "'");
}

}  // namespace

RunConfig config_from_toml(const std::string& text) {
  TomlTable table = parse_toml(text);
  RunConfig cfg;

  static const std::vector<std::string> known{"run",      "dataset",  "base",   "vae",
                                              "meta",     "finetune", "detect", "generate"};
  for (const auto& [sec, _] : table)
    if (std::find(known.begin(), known.end(), sec) == known.end())
      throw config_error("config: unknown section [" + sec + "]");

  auto section = [&](const std::string& name) {
    Section s{name, table.count(name) ? table[name] : std::map<std::string, TomlValue>{}};
    return s;
  };

  {
    Section s = section("run");
    s.get("name", cfg.run_name);
    s.get("workspace", cfg.workspace);
    s.finish();
  }
  {
    Section s = section("dataset");
    s.get("name", cfg.dataset.name);
    s.get("n", cfg.dataset.n);
    s.get("n_classes", cfg.dataset.n_classes);
    s.get("d_in", cfg.dataset.d_in);
    s.get("spread", cfg.dataset.spread);
    s.get("swirl", cfg.dataset.swirl);
    s.get("val_frac", cfg.dataset.val_frac);
    s.get("seed", cfg.dataset.seed);
    s.finish();
  }
  {
    Section s = section("base");
    s.get("hidden", cfg.base.hidden);
    s.get("activation", cfg.base.activation);
    s.get("optimizer", cfg.base.optimizer);
    s.get("lr", cfg.base.lr);
    s.get("n_models", cfg.base.n_models);
    s.get("n_epochs", cfg.base.pretrain.n_epochs);
    s.get("batch_size", cfg.base.pretrain.batch_size);
    s.get("save_epochs", cfg.base.pretrain.save_epochs);
    s.get("saves_per_epoch", cfg.base.pretrain.saves_per_epoch);
    s.get("seed", cfg.base.pretrain.seed);
    s.finish();
    if (cfg.base.activation != "relu" && cfg.base.activation != "tanh")
      throw config_error("config [base].activation: expected relu or tanh");
    cfg.base.pretrain.optim = make_optim(cfg.base.optimizer, cfg.base.lr);
  }
  {
    Section s = section("vae");
    s.get("latent_dim", cfg.vae.latent_dim);
    s.get("hidden", cfg.vae.hidden);
    s.get("steps", cfg.vae.train.steps);
    s.get("batch", cfg.vae.train.batch);
    s.get("lr", cfg.vae.train.lr);
    s.get("weight_decay", cfg.vae.train.weight_decay);
    s.get("seed", cfg.vae.train.seed);
    s.finish();
  }
  {
    Section s = section("meta");
    s.get("kind", cfg.meta.kind);
    s.get("pad_dim", cfg.meta.pad_dim);
    s.get("epochs", cfg.meta.train.epochs);
    s.get("batch", cfg.meta.train.batch);
    s.get("lr", cfg.meta.train.lr);
    s.get("weight_decay", cfg.meta.train.weight_decay);
    s.get("n_marginals", cfg.meta.train.n_marginals);
    s.get("hidden", cfg.meta.train.hidden);
    s.get("time_embed_dim", cfg.meta.train.time_embed_dim);
    s.get("context_dim", cfg.meta.train.context_dim);
    s.get("sigma", cfg.meta.train.path.sigma);
    std::string source = "kaiming_uniform";
    s.get("source", source);
    s.get("resample_p0", cfg.meta.train.resample_p0);
    s.get("ot_coupling", cfg.meta.train.ot_coupling);
    s.get("marginal_noise", cfg.meta.train.marginal_noise);
    s.get("seed", cfg.meta.train.seed);
    s.finish();
    if (cfg.meta.kind != "cfm" && cfg.meta.kind != "mmfm" && cfg.meta.kind != "jko")
      throw config_error("config [meta].kind: expected cfm, mmfm, or jko");
    if (source == "kaiming_uniform")
      cfg.meta.train.source = SourceKind::kaiming_uniform;
    else if (source == "kaiming_normal")
      cfg.meta.train.source = SourceKind::kaiming_normal;
    else if (source == "std_gauss")
      cfg.meta.train.source = SourceKind::std_gauss;
    else
      throw config_error("config [meta].source: unknown source '" + source + "'");
  }
  {
    Section s = section("finetune");
    s.get("reward", cfg.finetune.reward);
    s.get("m", cfg.finetune.m);
    s.get("reward_lr", cfg.finetune.reward_lr);
    s.get("reward_momentum", cfg.finetune.reward_momentum);
    s.get("pad_reg_weight", cfg.finetune.pad_reg_weight);
    s.get("corruption_level", cfg.finetune.corruption_level);
    s.get("h", cfg.finetune.cfg.h);
    s.get("iterations", cfg.finetune.cfg.iterations);
    s.get("traj_batch", cfg.finetune.cfg.traj_batch);
    s.get("a1_batches", cfg.finetune.cfg.a1_batches);
    s.get("full_sum", cfg.finetune.cfg.full_sum);
    s.get("lr", cfg.finetune.cfg.lr);
    s.get("weight_decay", cfg.finetune.cfg.weight_decay);
    s.get("eta_min", cfg.finetune.cfg.eta_min);
    s.get("grad_clip", cfg.finetune.cfg.grad_clip);
    s.get("seed", cfg.finetune.cfg.seed);
    s.finish();
    if (cfg.finetune.reward != "neg_ce" && cfg.finetune.reward != "neg_cdc")
      throw config_error("config [finetune].reward: expected neg_ce or neg_cdc");
  }
  {
    Section s = section("detect");
    s.get("corruption_level", cfg.detect.corruption_level);
    s.get("n_seeds", cfg.detect.n_seeds);
    s.get("kappa", cfg.detect.cdc.kappa);
    s.get("q_size", cfg.detect.cdc.q_size);
    s.get("p_size", cfg.detect.cdc.p_size);
    s.get("n_draws", cfg.detect.cdc.n_draws);
    s.get("ft_h", cfg.detect.cdc.ft.h);
    s.get("ft_iterations", cfg.detect.cdc.ft.iterations);
    s.get("ft_traj_batch", cfg.detect.cdc.ft.traj_batch);
    s.get("ft_lr", cfg.detect.cdc.ft.lr);
    s.finish();
    cfg.detect.cdc.seeds.clear();
    for (std::uint64_t i = 1; i <= cfg.detect.n_seeds; ++i) cfg.detect.cdc.seeds.push_back(i);
  }
  {
    Section s = section("generate");
    s.get("steps", cfg.generate.steps);
    s.get("count", cfg.generate.count);
    s.finish();
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return config_from_toml(text);
}

}  // namespace wf

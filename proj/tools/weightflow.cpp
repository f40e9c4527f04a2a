// weightflow: one binary, subcommand style. Artifacts live under
// <workspace>/<run>/; every command drops a run-log JSON next to them.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "weightflow/adjoint.hpp"
#include "weightflow/config.hpp"
#include "weightflow/container.hpp"
#include "weightflow/dataset.hpp"
#include "weightflow/errors.hpp"
#include "weightflow/flowgen.hpp"
#include "weightflow/metatrain.hpp"
#include "weightflow/pretrain.hpp"
#include "weightflow/shiftdetect.hpp"
#include "weightflow/weightcodec.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Cli {
  std::string config_path;
  std::string run_override;
  std::string workspace_override;
  std::int64_t seed_override = -1;
  std::size_t jobs = 1;

  wf::RunConfig cfg;
  std::string config_text;

  void load() {
    std::ifstream f(config_path);
    if (!f) throw wf::config_error("cannot open config file " + config_path);
    std::stringstream ss;
    ss << f.rdbuf();
    config_text = ss.str();
    cfg = wf::config_from_toml(config_text);
    if (!run_override.empty()) cfg.run_name = run_override;
    if (!workspace_override.empty()) cfg.workspace = workspace_override;
    if (const char* env = std::getenv("WEIGHTFLOW_WORKSPACE")) cfg.workspace = env;
  }

  fs::path run_dir() const {
    fs::path dir = fs::path(cfg.workspace) / cfg.run_name;
    fs::create_directories(dir);
    return dir;
  }
};

std::string git_describe() {
  FILE* p = ::popen("git describe --always --dirty 2>/dev/null", "r");
  if (!p) return "unknown";
  char buf[128] = {0};
  std::string out;
  while (std::fgets(buf, sizeof(buf), p)) out += buf;
  ::pclose(p);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

void write_runlog(const Cli& cli, const std::string& cmd, double wall_s, json extra) {
  json log;
  log["command"] = cmd;
  log["config"] = cli.config_path;
  char hash[16];
  std::snprintf(hash, sizeof(hash), "%08x",
                wf::crc32(cli.config_text.data(), cli.config_text.size()));
  log["config_crc32"] = hash;
  log["git"] = git_describe();
  log["wall_seconds"] = wall_s;
  log["extra"] = std::move(extra);
  std::ofstream f(cli.run_dir() / (cmd + ".runlog.json"));
  f << log.dump(2) << "\n";
}

wf::MlpSpec base_arch(const wf::RunConfig& cfg) {
  std::vector<std::size_t> widths;
  widths.push_back(cfg.dataset.d_in);
  for (std::size_t h : cfg.base.hidden) widths.push_back(h);
  widths.push_back(cfg.dataset.n_classes);
  wf::Activation act =
      cfg.base.activation == "tanh" ? wf::Activation::tanh : wf::Activation::relu;
  return wf::MlpSpec(widths, act);
}

json arch_json(const wf::MlpSpec& arch) {
  return json{{"widths", arch.widths},
              {"activation", arch.activation == wf::Activation::tanh ? "tanh" : "relu"}};
}

wf::MlpSpec arch_from_json(const json& j) {
  std::vector<std::size_t> widths = j.at("widths").get<std::vector<std::size_t>>();
  wf::Activation act =
      j.at("activation").get<std::string>() == "tanh" ? wf::Activation::tanh : wf::Activation::relu;
  return wf::MlpSpec(widths, act);
}

std::string zoo_path(const fs::path& dir, std::size_t i) {
  return (dir / ("zoo_" + std::to_string(i) + ".nmwt")).string();
}

std::vector<wf::TrajectoryTensor> load_zoos(const fs::path& dir) {
  std::vector<wf::TrajectoryTensor> zoos;
  for (std::size_t i = 0;; ++i) {
    std::string path = zoo_path(dir, i);
    if (!fs::exists(path)) break;
    wf::Container c = wf::read_container(path);
    if (c.kind != wf::ContainerKind::traj)
      throw wf::data_error(path + ": expected a trajectory container");
    wf::TrajectoryTensor tt;
    std::size_t epochs = c.meta.at("save_epochs").get<std::size_t>();
    std::size_t saves = c.meta.at("saves_per_epoch").get<std::size_t>();
    if (epochs * saves != c.count)
      throw wf::data_error(path + ": sidecar epoch/save counts disagree with payload");
    tt.data = wf::Tensor({epochs, saves, c.dim}, c.payload);
    tt.times = c.meta.at("iteration_indices").get<std::vector<std::size_t>>();
    tt.arch = arch_from_json(c.meta.at("arch"));
    tt.optimizer = c.meta.at("optimizer").get<std::string>();
    tt.lr = c.meta.at("lr").get<double>();
    tt.final_val_acc = c.meta.at("final_val_acc").get<double>();
    tt.dataset_tag = c.meta.value("dataset", "");
    zoos.push_back(std::move(tt));
  }
  if (zoos.empty()) throw wf::data_error("no zoo containers under " + dir.string());
  return zoos;
}

wf::MetaKind meta_kind(const std::string& name) {
  if (name == "cfm") return wf::MetaKind::cfm;
  if (name == "mmfm") return wf::MetaKind::mmfm;
  if (name == "jko") return wf::MetaKind::jko;
  throw wf::config_error("unknown meta kind '" + name + "'");
}

struct LoadedMeta {
  wf::MetaKind kind = wf::MetaKind::cfm;
  wf::VelocityModel velocity;
  wf::PotentialModel potential;
  wf::MlpSpec arch{{1, 1}, wf::Activation::relu};
  wf::SourceKind source = wf::SourceKind::kaiming_uniform;
  json meta;
};

LoadedMeta load_meta(const fs::path& dir, const std::string& file) {
  std::string path = (dir / file).string();
  wf::Container c = wf::read_container(path);
  LoadedMeta m;
  m.meta = c.meta;
  m.kind = meta_kind(wf::kind_name(c.kind));
  m.arch = arch_from_json(c.meta.at("base_arch"));
  std::string src = c.meta.value("source", "kaiming_uniform");
  m.source = src == "kaiming_normal" ? wf::SourceKind::kaiming_normal
             : src == "std_gauss"    ? wf::SourceKind::std_gauss
                                     : wf::SourceKind::kaiming_uniform;
  std::size_t state_dim = c.meta.at("state_dim").get<std::size_t>();
  std::vector<std::size_t> hidden = c.meta.at("hidden").get<std::vector<std::size_t>>();
  std::size_t te = c.meta.at("time_embed_dim").get<std::size_t>();
  if (m.kind == wf::MetaKind::jko) {
    m.potential = wf::PotentialModel::make(state_dim, hidden, te, 0);
    if (m.potential.params.size() != c.payload.size())
      throw wf::data_error(path + ": parameter payload does not match the sidecar shape");
    m.potential.params = c.payload;
  } else {
    std::size_t ctx = c.meta.value("context_dim", std::size_t{0});
    m.velocity = wf::VelocityModel::make(state_dim, hidden, te, ctx, 0);
    if (m.velocity.params.size() != c.payload.size())
      throw wf::data_error(path + ": parameter payload does not match the sidecar shape");
    m.velocity.params = c.payload;
  }
  return m;
}

// --- subcommands -------------------------------------------------------------

int cmd_pretrain(Cli& cli) {
  wf::SynthDataset ds = wf::make_dataset(cli.cfg.dataset);
  wf::MlpSpec arch = base_arch(cli.cfg);
  fs::path dir = cli.run_dir();
  std::size_t n = cli.cfg.base.n_models;
  std::vector<wf::TrajectoryTensor> zoos(n);
  std::uint64_t seed0 =
      cli.seed_override >= 0 ? std::uint64_t(cli.seed_override) : cli.cfg.base.pretrain.seed;

  auto worker = [&](std::size_t i) {
    wf::PretrainConfig pc = cli.cfg.base.pretrain;
    pc.seed = seed0 + i;
    zoos[i] = wf::pretrain_and_checkpoint(ds, arch, pc);
  };
  std::size_t jobs = std::max<std::size_t>(1, std::min(cli.jobs, n));
  for (std::size_t start = 0; start < n; start += jobs) {
    std::vector<std::thread> pool;
    for (std::size_t i = start; i < std::min(start + jobs, n); ++i) pool.emplace_back(worker, i);
    for (auto& t : pool) t.join();
  }

  json accs = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const wf::TrajectoryTensor& tt = zoos[i];
    json meta{{"arch", arch_json(arch)},
              {"optimizer", tt.optimizer},
              {"lr", tt.lr},
              {"save_epochs", tt.n_epochs()},
              {"saves_per_epoch", tt.saves_per_epoch()},
              {"iteration_indices", tt.times},
              {"final_val_acc", tt.final_val_acc},
              {"dataset", cli.cfg.dataset.name},
              {"seed", seed0 + i}};
    wf::write_container(zoo_path(dir, i), wf::ContainerKind::traj, tt.dim(), tt.data.data, meta);
    std::printf("zoo %zu: final val acc %.4f\n", i, tt.final_val_acc);
    accs.push_back(tt.final_val_acc);
  }
  write_runlog(cli, "pretrain", 0.0, json{{"final_val_acc", accs}, {"n_models", n}});
  return 0;
}

int cmd_train_vae(Cli& cli) {
  fs::path dir = cli.run_dir();
  std::vector<wf::TrajectoryTensor> zoos = load_zoos(dir);
  std::size_t dim = zoos[0].dim();
  std::size_t rows = 0;
  for (const auto& z : zoos) rows += z.data.rows() * z.data.shape[1];
  wf::Tensor pool({rows, dim});
  std::size_t r = 0;
  for (const auto& z : zoos)
    for (double v : z.data.data) pool.data[r++] = v;

  wf::VaeTrainConfig tc = cli.cfg.vae.train;
  if (cli.seed_override >= 0) tc.seed = std::uint64_t(cli.seed_override);
  wf::VaeModel model = wf::make_vae(dim, cli.cfg.vae.latent_dim, cli.cfg.vae.hidden, tc.seed);
  std::vector<double> curve = wf::train_vae(model, pool, tc);

  std::vector<double> payload = model.enc_params;
  payload.insert(payload.end(), model.dec_params.begin(), model.dec_params.end());
  json meta{{"dim", dim},
            {"latent_dim", cli.cfg.vae.latent_dim},
            {"hidden", cli.cfg.vae.hidden},
            {"enc_size", model.enc_params.size()},
            {"dec_size", model.dec_params.size()},
            {"seed", tc.seed},
            {"final_loss", curve.empty() ? 0.0 : curve.back()}};
  wf::write_container((dir / "vae.nmwt").string(), wf::ContainerKind::vae, payload.size(), payload,
                      meta);
  std::printf("vae: %zu steps, final loss %.6f\n", curve.size(),
              curve.empty() ? 0.0 : curve.back());
  write_runlog(cli, "train-vae", 0.0,
               json{{"final_loss", curve.empty() ? 0.0 : curve.back()}, {"steps", curve.size()}});
  return 0;
}

int cmd_train_meta(Cli& cli, const std::string& kind_flag, std::int64_t k_flag) {
  fs::path dir = cli.run_dir();
  std::vector<wf::TrajectoryTensor> zoos = load_zoos(dir);
  std::string kind_name = kind_flag.empty() ? cli.cfg.meta.kind : kind_flag;
  wf::MetaKind kind = meta_kind(kind_name);

  wf::MetaTrainConfig tc = cli.cfg.meta.train;
  if (cli.seed_override >= 0) tc.seed = std::uint64_t(cli.seed_override);
  if (k_flag > 0) tc.n_marginals = std::size_t(k_flag) + 1;
  wf::TrainedMeta trained = wf::train_meta(kind, zoos, tc);

  const std::vector<double>& params =
      kind == wf::MetaKind::jko ? trained.potential.params : trained.velocity.params;
  const char* src = tc.source == wf::SourceKind::kaiming_normal ? "kaiming_normal"
                    : tc.source == wf::SourceKind::std_gauss    ? "std_gauss"
                                                                : "kaiming_uniform";
  json meta{{"base_arch", arch_json(zoos[0].arch)},
            {"state_dim", zoos[0].dim()},
            {"hidden", tc.hidden},
            {"time_embed_dim", tc.time_embed_dim},
            {"context_dim", tc.context_dim},
            {"n_marginals", tc.n_marginals},
            {"source", src},
            {"seed", tc.seed},
            {"final_loss", trained.loss_curve.empty() ? 0.0 : trained.loss_curve.back()},
            {"dataset", cli.cfg.dataset.name}};
  wf::write_container((dir / "meta.nmwt").string(), wf::kind_from_name(kind_name), params.size(),
                      params, meta);

  std::ofstream csv(dir / "meta_loss.csv");
  csv << "epoch,loss\n";
  for (std::size_t e = 0; e < trained.loss_curve.size(); ++e)
    csv << e << "," << trained.loss_curve[e] << "\n";
  std::printf("meta (%s): %zu epochs, final loss %.6f\n", kind_name.c_str(),
              trained.loss_curve.size(),
              trained.loss_curve.empty() ? 0.0 : trained.loss_curve.back());
  write_runlog(cli, "train-meta", 0.0,
               json{{"kind", kind_name},
                    {"final_loss", trained.loss_curve.empty() ? 0.0 : trained.loss_curve.back()}});
  return 0;
}

int cmd_generate(Cli& cli, const std::string& meta_file, std::int64_t steps_flag) {
  fs::path dir = cli.run_dir();
  LoadedMeta m = load_meta(dir, meta_file);
  wf::SynthDataset ds = wf::make_dataset(cli.cfg.dataset);
  std::size_t count = cli.cfg.generate.count;
  std::size_t steps = steps_flag > 0 ? std::size_t(steps_flag) : cli.cfg.generate.steps;
  std::uint64_t seed = cli.seed_override >= 0 ? std::uint64_t(cli.seed_override) : 0;

  std::size_t state_dim =
      m.kind == wf::MetaKind::jko ? m.potential.state_dim : m.velocity.state_dim;
  wf::SourceDist src{m.source, m.arch, state_dim};
  wf::Tensor x0 = src.sample(count, seed);
  wf::Tensor x1;
  if (m.kind == wf::MetaKind::jko) {
    x1 = wf::Tensor({count, state_dim});
    for (std::size_t i = 0; i < count; ++i) {
      wf::Tensor row({1, state_dim});
      for (std::size_t j = 0; j < state_dim; ++j) row.at(0, j) = x0.at(i, j);
      wf::Tensor traj = wf::jko_generate(m.potential, row, steps);
      for (std::size_t j = 0; j < state_dim; ++j) x1.at(i, j) = traj.at(traj.rows() - 1, j);
    }
  } else {
    wf::GenConfig gc;
    gc.steps = steps;
    gc.seed = seed;
    x1 = wf::integrate_batch(m.velocity, x0, nullptr, gc);
  }

  json accs = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> row(x1.data.begin() + i * state_dim, x1.data.begin() + (i + 1) * state_dim);
    wf::WeightVec w = wf::flatten_pad(m.arch, std::span<const double>(row).first(m.arch.param_count()),
                                      state_dim, cli.cfg.dataset.name);
    auto [acc, loss] = wf::eval_weights(w, ds);
    std::printf("sample %zu: val acc %.4f, val loss %.4f\n", i, acc, loss);
    accs.push_back(acc);
  }
  json meta{{"arch", arch_json(m.arch)},
            {"source_meta", meta_file},
            {"steps", steps},
            {"seed", seed},
            {"val_acc", accs},
            {"dataset", cli.cfg.dataset.name}};
  wf::write_container((dir / "generated.nmwt").string(), wf::ContainerKind::weights, state_dim,
                      x1.data, meta);
  write_runlog(cli, "generate", 0.0, json{{"val_acc", accs}, {"steps", steps}});
  return 0;
}

int cmd_eval(Cli& cli, const std::string& input, int corruption) {
  fs::path dir = cli.run_dir();
  fs::path path = fs::path(input).is_absolute() ? fs::path(input) : dir / input;
  wf::Container c = wf::read_container(path.string());
  if (c.kind != wf::ContainerKind::weights)
    throw wf::data_error(path.string() + ": expected a weights container");
  wf::MlpSpec arch = arch_from_json(c.meta.at("arch"));
  wf::SynthDataset ds = wf::make_dataset(cli.cfg.dataset);
  if (corruption > 0)
    ds = wf::corrupt(ds, wf::CorruptionLevel::preset(corruption), cli.cfg.dataset.seed + 1);

  json rows = json::array();
  double mean_acc = 0.0;
  for (std::size_t i = 0; i < c.count; ++i) {
    std::vector<double> row(c.payload.begin() + i * c.dim, c.payload.begin() + (i + 1) * c.dim);
    wf::WeightVec w = wf::flatten_pad(arch, std::span<const double>(row).first(arch.param_count()),
                                      c.dim, cli.cfg.dataset.name);
    auto [acc, loss] = wf::eval_weights(w, ds);
    std::printf("row %zu: val acc %.4f, val loss %.4f\n", i, acc, loss);
    rows.push_back(json{{"acc", acc}, {"loss", loss}});
    mean_acc += acc / double(c.count);
  }
  std::printf("mean val acc %.4f\n", mean_acc);
  std::ofstream f(dir / "eval.json");
  f << json{{"input", input}, {"corruption_level", corruption}, {"rows", rows},
            {"mean_acc", mean_acc}}
           .dump(2)
    << "\n";
  write_runlog(cli, "eval", 0.0, json{{"mean_acc", mean_acc}});
  return 0;
}

int cmd_finetune(Cli& cli, const std::string& meta_file) {
  fs::path dir = cli.run_dir();
  LoadedMeta m = load_meta(dir, meta_file);
  if (m.kind == wf::MetaKind::jko)
    throw wf::config_error("finetune needs a velocity-field meta-model (cfm or mmfm)");
  wf::SynthDataset ds = wf::make_dataset(cli.cfg.dataset);
  int lvl = cli.cfg.finetune.corruption_level;
  if (lvl > 0) ds = wf::corrupt(ds, wf::CorruptionLevel::preset(lvl), cli.cfg.dataset.seed + 1);
  if (cli.cfg.finetune.reward != "neg_ce")
    throw wf::config_error("finetune command supports the neg_ce reward; neg_cdc runs inside "
                           "detect-shift");

  wf::RewardSpec reward;
  reward.loss_grad = wf::neg_ce_reward(m.arch, ds, cli.cfg.finetune.m);
  reward.reward_lr = cli.cfg.finetune.reward_lr;
  reward.momentum = cli.cfg.finetune.reward_momentum;
  reward.pad_reg_weight = cli.cfg.finetune.pad_reg_weight;
  reward.pad_begin = m.arch.param_count();

  wf::FtConfig fc = cli.cfg.finetune.cfg;
  if (cli.seed_override >= 0) fc.seed = std::uint64_t(cli.seed_override);
  wf::SourceDist src{m.source, m.arch, m.velocity.state_dim};
  wf::FinetuneResult res = wf::finetune(m.velocity, src, reward, fc);

  json meta = m.meta;
  meta["finetuned_from"] = meta_file;
  meta["reward"] = cli.cfg.finetune.reward;
  meta["corruption_level"] = lvl;
  wf::write_container((dir / "meta_ft.nmwt").string(),
                      m.kind == wf::MetaKind::mmfm ? wf::ContainerKind::mmfm
                                                   : wf::ContainerKind::cfm,
                      res.v_ft.params.size(), res.v_ft.params, meta);
  std::ofstream csv(dir / "ft_curve.csv");
  csv << "iteration,am_loss,mean_reward\n";
  for (std::size_t i = 0; i < res.curve.size(); ++i)
    csv << i << "," << res.curve[i].am_loss << "," << res.curve[i].mean_reward << "\n";
  double first = res.curve.empty() ? 0.0 : res.curve.front().mean_reward;
  double last = res.curve.empty() ? 0.0 : res.curve.back().mean_reward;
  std::printf("finetune: mean reward %.4f -> %.4f over %zu iterations\n", first, last,
              res.curve.size());
  write_runlog(cli, "finetune", 0.0, json{{"reward_first", first}, {"reward_last", last}});
  return 0;
}

json seed_stats_json(const wf::SeedStats& st) {
  return json{{"seed", st.seed},
              {"phi_p_star", st.phi_p_star},
              {"phi_q", st.phi_q},
              {"phi_p_star_val", st.phi_p_star_val},
              {"phi_q_val", st.phi_q_val},
              {"ks_d", st.ks_d},
              {"ks_p", st.ks_p},
              {"acc_before", st.acc_before},
              {"acc_after", st.acc_after}};
}

int cmd_detect_shift(Cli& cli, const std::string& meta_file, std::int64_t q_size,
                     std::int64_t n_seeds, bool null_run) {
  fs::path dir = cli.run_dir();
  LoadedMeta m = load_meta(dir, meta_file);
  if (m.kind == wf::MetaKind::jko)
    throw wf::config_error("detect-shift needs a velocity-field meta-model");
  wf::SynthDataset ds_p = wf::make_dataset(cli.cfg.dataset);

  wf::CdcConfig cdc = cli.cfg.detect.cdc;
  if (q_size > 0) cdc.q_size = std::size_t(q_size);
  std::size_t seeds = n_seeds > 0 ? std::size_t(n_seeds) : cli.cfg.detect.n_seeds;
  cdc.seeds.clear();
  std::uint64_t seed0 = cli.seed_override >= 0 ? std::uint64_t(cli.seed_override) : 1;
  for (std::uint64_t i = 0; i < seeds; ++i) cdc.seeds.push_back(seed0 + i);

  // Q: held-out rows of the (possibly corrupted) distribution.
  wf::SynthDataset ds_q = ds_p;
  if (!null_run)
    ds_q = wf::corrupt(ds_p, wf::CorruptionLevel::preset(cli.cfg.detect.corruption_level),
                       cli.cfg.dataset.seed + 7);
  if (ds_q.val_inputs.rows() < cdc.q_size)
    throw wf::data_error("validation split smaller than q_size");
  wf::Tensor qx({cdc.q_size, ds_q.val_inputs.cols()});
  for (std::size_t i = 0; i < cdc.q_size; ++i)
    for (std::size_t j = 0; j < qx.cols(); ++j) qx.at(i, j) = ds_q.val_inputs.at(i, j);

  std::size_t state_dim = m.velocity.state_dim;
  wf::SourceDist src{m.source, m.arch, state_dim};

  wf::ShiftReport report;
  // Every shard needs >= 2 seeds for its internal aggregation.
  std::size_t jobs = std::max<std::size_t>(1, std::min(cli.jobs, cdc.seeds.size() / 2));
  if (jobs == 1) {
    report = wf::meta_detectron(m.velocity, src, m.arch, ds_p, qx, cdc);
  } else {
    // Seeds are independent; shard them across threads and merge the stats.
    std::vector<std::vector<wf::SeedStats>> shards(jobs);
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w)
      pool.emplace_back([&, w] {
        try {
          wf::CdcConfig sub = cdc;
          sub.seeds.clear();
          for (std::size_t i = w; i < cdc.seeds.size(); i += jobs)
            sub.seeds.push_back(cdc.seeds[i]);
          if (sub.seeds.empty()) return;
          shards[w] = wf::meta_detectron(m.velocity, src, m.arch, ds_p, qx, sub).per_seed;
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (auto& shard : shards)
      for (auto& st : shard) report.per_seed.push_back(std::move(st));
    std::sort(report.per_seed.begin(), report.per_seed.end(),
              [](const auto& a, const auto& b) { return a.seed < b.seed; });
    std::vector<double> phi_null, phi_shift;
    double ent = 0.0;
    for (const auto& st : report.per_seed) {
      phi_null.push_back(st.phi_p_star);
      phi_shift.push_back(st.phi_q);
      ent += 1.0 - st.ks_p;
    }
    wf::AggregateResult dar = wf::aggregate(phi_null, phi_shift);
    report.tpr_at_5 = dar.tpr_at_5;
    report.auroc_dar = dar.auroc;
    report.auroc_entropy = ent / double(report.per_seed.size());
  }

  json per_seed = json::array();
  for (const auto& st : report.per_seed) per_seed.push_back(seed_stats_json(st));
  json out{{"null", null_run},
           {"q_size", cdc.q_size},
           {"corruption_level", null_run ? 0 : cli.cfg.detect.corruption_level},
           {"tpr_at_5", report.tpr_at_5},
           {"auroc_dar", report.auroc_dar},
           {"auroc_entropy", report.auroc_entropy},
           {"per_seed", per_seed}};
  std::string name = null_run ? "shift_report_null.json" : "shift_report.json";
  std::ofstream f(dir / name);
  f << out.dump(2) << "\n";
  std::printf("detect-shift (%s, |Q|=%zu, %zu seeds): TPR@5 %.3f, AUROC dar %.3f, entropy %.3f\n",
              null_run ? "null" : "shifted", cdc.q_size, report.per_seed.size(), report.tpr_at_5,
              report.auroc_dar, report.auroc_entropy);
  write_runlog(cli, "detect-shift", 0.0,
               json{{"tpr_at_5", report.tpr_at_5},
                    {"auroc_dar", report.auroc_dar},
                    {"auroc_entropy", report.auroc_entropy}});
  return 0;
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw wf::data_error("cannot open " + p.string());
  json j;
  f >> j;
  return j;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  fs::path out = out_dir.empty() ? fs::path(".") : fs::path(out_dir);
  fs::create_directories(out);

  std::ofstream csv(out / "report.csv");
  std::ofstream md(out / "report.md");
  csv << "run,kind,dataset,final_meta_loss,mean_gen_acc\n";
  md << "| run | kind | dataset | final meta loss | mean gen acc |\n";
  md << "| --- | --- | --- | --- | --- |\n";

  json shift_rows = json::array();
  for (const std::string& rd : run_dirs) {
    fs::path dir(rd);
    if (!fs::is_directory(dir)) throw wf::data_error("missing run directory " + rd);
    std::string kind = "-", dataset = "-";
    double meta_loss = std::nan(""), gen_acc = std::nan("");
    if (fs::exists(dir / "meta.nmwt")) {
      wf::Container c = wf::read_container((dir / "meta.nmwt").string());
      kind = wf::kind_name(c.kind);
      dataset = c.meta.value("dataset", "-");
      meta_loss = c.meta.value("final_loss", std::nan(""));
    }
    if (fs::exists(dir / "generated.nmwt")) {
      wf::Container c = wf::read_container((dir / "generated.nmwt").string());
      double sum = 0.0;
      for (double a : c.meta.at("val_acc")) sum += a;
      gen_acc = sum / double(c.meta.at("val_acc").size());
    }
    std::string name = dir.filename().string();
    csv << name << "," << kind << "," << dataset << "," << meta_loss << "," << gen_acc << "\n";
    md << "| " << name << " | " << kind << " | " << dataset << " | " << meta_loss << " | "
       << gen_acc << " |\n";

    for (const char* f : {"shift_report.json", "shift_report_null.json"}) {
      if (!fs::exists(dir / f)) continue;
      json s = read_json(dir / f);
      shift_rows.push_back(json{{"run", name},
                                {"null", s.value("null", false)},
                                {"q_size", s.value("q_size", 0)},
                                {"tpr_at_5", s.value("tpr_at_5", 0.0)},
                                {"auroc_dar", s.value("auroc_dar", 0.0)},
                                {"auroc_entropy", s.value("auroc_entropy", 0.0)}});
    }
    if (fs::exists(dir / "meta_loss.csv"))
      fs::copy_file(dir / "meta_loss.csv", out / (name + "_meta_loss.csv"),
                    fs::copy_options::overwrite_existing);
  }

  if (!shift_rows.empty()) {
    std::ofstream sf(out / "shift_report.csv");
    sf << "run,null,q_size,tpr_at_5,auroc_dar,auroc_entropy\n";
    md << "\n| run | null | q_size | TPR@5 | AUROC (dar) | AUROC (entropy) |\n";
    md << "| --- | --- | --- | --- | --- | --- |\n";
    for (const json& r : shift_rows) {
      sf << r["run"].get<std::string>() << "," << r["null"] << "," << r["q_size"] << ","
         << r["tpr_at_5"] << "," << r["auroc_dar"] << "," << r["auroc_entropy"] << "\n";
      md << "| " << r["run"].get<std::string>() << " | " << r["null"] << " | " << r["q_size"]
         << " | " << r["tpr_at_5"] << " | " << r["auroc_dar"] << " | " << r["auroc_entropy"]
         << " |\n";
    }
  }
  std::printf("report: %zu runs -> %s\n", run_dirs.size(), (out / "report.md").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weightflow: generative flows over neural-network weight space"};
  app.require_subcommand(1);

  Cli cli;
  std::string kind_flag, meta_file = "meta.nmwt", eval_input = "generated.nmwt", out_dir;
  std::int64_t k_flag = -1, steps_flag = -1, q_size = -1, n_seeds = -1;
  int eval_corruption = 0;
  bool null_run = false;
  std::vector<std::string> run_dirs;

  auto add_common = [&](CLI::App* sub, bool need_config = true) {
    auto* opt = sub->add_option("--config", cli.config_path, "run configuration (TOML)");
    if (need_config) opt->required();
    sub->add_option("--run", cli.run_override, "run name (overrides [run].name)");
    sub->add_option("--workspace", cli.workspace_override, "workspace root");
    sub->add_option("--seed", cli.seed_override, "seed override");
    sub->add_option("--jobs", cli.jobs, "threads for seed sweeps")->check(CLI::PositiveNumber);
  };

  auto* pretrain = app.add_subcommand("pretrain", "train the base-classifier zoo");
  add_common(pretrain);
  auto* train_vae = app.add_subcommand("train-vae", "train the weight-space VAE on the zoo");
  add_common(train_vae);
  auto* train_meta = app.add_subcommand("train-meta", "train the weight-space flow model");
  add_common(train_meta);
  train_meta->add_option("--kind", kind_flag, "cfm | mmfm | jko");
  train_meta->add_option("--k", k_flag, "mmfm segment count (n_marginals - 1)");
  auto* generate = app.add_subcommand("generate", "sample classifiers from the meta-model");
  add_common(generate);
  generate->add_option("--meta", meta_file, "meta container file name");
  generate->add_option("--steps", steps_flag, "integration steps");
  auto* eval = app.add_subcommand("eval", "evaluate a weights container on the dataset");
  add_common(eval);
  eval->add_option("--input", eval_input, "weights container (relative to the run dir)");
  eval->add_option("--corruption-level", eval_corruption, "evaluate under corruption");
  auto* finetune = app.add_subcommand("finetune", "reward fine-tuning (adjoint matching)");
  add_common(finetune);
  finetune->add_option("--meta", meta_file, "meta container file name");
  auto* detect = app.add_subcommand("detect-shift", "meta-detectron covariate-shift test");
  add_common(detect);
  detect->add_option("--meta", meta_file, "meta container file name");
  detect->add_option("--q-size", q_size, "|Q|");
  detect->add_option("--seeds", n_seeds, "number of detection seeds");
  detect->add_flag("--null", null_run, "draw Q from the clean distribution");
  auto* report = app.add_subcommand("report", "aggregate run directories into tables");
  report->add_option("dirs", run_dirs, "run directories")->required();
  report->add_option("--out", out_dir, "output directory (default: cwd)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto t0 = std::chrono::steady_clock::now();
  try {
    if (report->parsed()) return cmd_report(run_dirs, out_dir);
    cli.load();
    int rc = 0;
    if (pretrain->parsed()) rc = cmd_pretrain(cli);
    else if (train_vae->parsed()) rc = cmd_train_vae(cli);
    else if (train_meta->parsed()) rc = cmd_train_meta(cli, kind_flag, k_flag);
    else if (generate->parsed()) rc = cmd_generate(cli, meta_file, steps_flag);
    else if (eval->parsed()) rc = cmd_eval(cli, eval_input, eval_corruption);
    else if (finetune->parsed()) rc = cmd_finetune(cli, meta_file);
    else if (detect->parsed()) rc = cmd_detect_shift(cli, meta_file, q_size, n_seeds, null_run);
    double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    // Rewrite the runlog wall time now that the command finished.
    for (const auto* sub :
         {pretrain, train_vae, train_meta, generate, eval, finetune, detect})
      if (sub->parsed()) {
        fs::path log = cli.run_dir() / (sub->get_name() + ".runlog.json");
        if (fs::exists(log)) {
          json j = read_json(log);
          j["wall_seconds"] = wall;
          std::ofstream f(log);
          f << j.dump(2) << "\n";
        }
      }
    return rc;
  } catch (const wf::config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const wf::data_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}

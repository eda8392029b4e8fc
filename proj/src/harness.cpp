#include "deed/harness.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "deed/checkpoint.hpp"

namespace deed {

namespace {

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

// A section given inline or as a path to its own JSON file.
nlohmann::json inline_or_file(const nlohmann::json& v) {
  return v.is_string() ? read_json_file(v.get<std::string>()) : v;
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CapacityError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ArtifactError& e) {
    err << "artifact error: " << e.what() << '\n';
    return kExitArtifact;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitNumeric;
  }
}

std::vector<TaskSample> require_dataset(const std::string& path, const char* what) {
  if (path.empty()) throw ValidationError(std::string("no ") + what + " dataset path given");
  auto data = read_dataset(path);
  if (data.empty()) throw ValidationError(std::string(what) + " dataset " + path + " is empty");
  return data;
}

ModelConfig model_config_or_default(const RunConfig& c) {
  ModelConfig m = c.model.value_or(ModelConfig{});
  m.validate();
  if (m.vocab_size < Vocabulary::size())
    throw ValidationError("vocab_size " + std::to_string(m.vocab_size) + " is smaller than the character vocabulary (" +
                          std::to_string(Vocabulary::size()) + ")");
  return m;
}

MultiExitModel load_for_eval(const RunConfig& c) {
  if (!c.checkpoint) throw ValidationError("--ckpt is required");
  MultiExitModel model = load_checkpoint(*c.checkpoint);
  if (c.model && !(*c.model == model.config()))
    throw ArtifactError("checkpoint config does not match the model config given");
  return model;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << text;
}

}  // namespace

void RunConfig::validate_taus() const {
  for (float t : taus)
    if (!(t >= 0.0F && t <= kMaxTau)) throw ValidationError("tau " + std::to_string(t) + " outside [0, 1.01]");
}

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  try {
    if (j.contains("model")) c.model = inline_or_file(j.at("model")).get<ModelConfig>();
    if (j.contains("train")) c.train = inline_or_file(j.at("train")).get<TrainConfig>();
    c.train_data = j.value("train_data", std::string{});
    c.eval_data = j.value("eval_data", std::string{});
    if (j.contains("strategy")) {
      c.strategies.clear();
      const auto& s = j.at("strategy");
      if (s.is_string()) {
        c.strategies = parse_strategy_list(s.get<std::string>());
      } else {
        for (const auto& x : s) c.strategies.push_back(parse_strategy(x.get<std::string>()));
      }
    }
    if (j.contains("tau")) {
      const auto& t = j.at("tau");
      c.taus = t.is_array() ? t.get<std::vector<float>>() : std::vector<float>{t.get<float>()};
    }
    if (j.contains("out")) c.out_dir = j.at("out").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("ckpt")) c.checkpoint = j.at("ckpt").get<std::string>();
    if (j.contains("gen")) {
      const auto& g = j.at("gen");
      if (g.contains("kinds")) {
        c.gen_kinds.clear();
        for (const auto& k : g.at("kinds")) c.gen_kinds.push_back(parse_task_kind(k.get<std::string>()));
      }
      c.gen_train_count = g.value("train_count", c.gen_train_count);
      c.gen_eval_count = g.value("eval_count", c.gen_eval_count);
    }
    if (j.contains("ablate")) c.ablate_seeds = j.at("ablate").value("seeds", std::vector<std::uint64_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad run config: ") + e.what());
  }
  c.train.validate();
  c.validate_taus();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_json_file(path)); }

std::vector<float> parse_tau_list(const std::string& text) {
  std::vector<float> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stof(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("bad tau value '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("empty tau list");
  return out;
}

std::vector<Strategy> parse_strategy_list(const std::string& text) {
  std::vector<Strategy> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_strategy(item));
  if (out.empty()) throw ValidationError("empty strategy list");
  return out;
}

std::vector<SweepRow> run_sweep(const MultiExitModel& model, std::span<const TaskSample> samples,
                                std::span<const Strategy> strategies, std::span<const float> taus) {
  std::vector<SweepRow> rows;
  for (auto s : strategies)
    for (float t : taus) rows.push_back({s, t, evaluate(model, samples, s, t).report});
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows, std::size_t layers) {
  std::ostringstream os;
  os << "strategy,tau,em,anls,units,wall_ns";
  for (std::size_t n = 1; n <= layers; ++n) os << ",exit_" << n;
  os << '\n' << std::setprecision(9);
  for (const auto& r : rows) {
    os << strategy_name(r.strategy) << ',' << r.tau << ',' << r.report.exact_match << ',' << r.report.anls << ','
       << r.report.mean_compute_units << ',' << r.report.mean_wall_ns;
    for (auto c : r.report.exit_histogram) os << ',' << c;
    os << '\n';
  }
  write_text(path, os.str());
}

std::vector<AblationVariant> ablation_variants() {
  return {{"baseline", false, false}, {"sh", true, false}, {"am", false, true}, {"sh_am", true, true}};
}

std::vector<AblationRow> run_ablation(const ModelConfig& base, const TrainConfig& train_config,
                                      std::span<const TaskSample> train_data, std::span<const TaskSample> eval_data,
                                      std::span<const AblationVariant> variants, std::span<const Objective> objectives,
                                      std::span<const std::uint64_t> seeds) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    for (auto obj : objectives) {
      for (auto seed : seeds) {
        ModelConfig mc = base;
        mc.shared_head = v.shared_head;
        mc.adaptation_modules = v.adaptation_modules;
        TrainConfig tc = train_config;
        tc.objective = obj;
        tc.seed = seed;
        const auto trained = train(mc, tc, train_data);
        for (std::size_t m = 1; m <= mc.n_dec_layers; ++m) {
          const auto r = fixed_depth_eval(trained.model, eval_data, m).report;
          rows.push_back({v.name, std::string(objective_name(obj)), seed, m, r.exact_match, r.anls});
        }
      }
    }
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,objective,seed,layer,em,anls\n" << std::setprecision(9);
  for (const auto& r : rows)
    os << r.variant << ',' << r.objective << ',' << r.seed << ',' << r.layer << ',' << r.exact_match << ',' << r.anls
       << '\n';
  write_text(path, os.str());
}

int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ModelConfig mc = model_config_or_default(config);
    TrainConfig tc = config.train;
    if (config.seed) tc.seed = *config.seed;
    const auto data = require_dataset(config.train_data, "training");
    const auto result = train(mc, tc, data);
    const auto ckpt = config.out_dir / "model.ckpt";
    save_checkpoint(result.model, ckpt);
    write_loss_curve_csv(config.out_dir / "loss.csv", result.curve, mc.n_dec_layers);
    out << nlohmann::json{{"checkpoint", ckpt.string()},
                          {"steps", tc.steps},
                          {"final_loss", result.curve.back().loss.total}}
               .dump()
        << '\n';
    return kExitOk;
  });
}

int cmd_eval(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (config.strategies.size() != 1 || config.taus.size() != 1)
      throw ValidationError("eval takes exactly one strategy and one tau");
    config.validate_taus();
    const MultiExitModel model = load_for_eval(config);
    const auto data = require_dataset(config.eval_data, "evaluation");
    const Strategy strategy = config.strategies.front();
    const float tau = config.taus.front();
    EvalRun run;
    if (config.traces) {
      std::ifstream in(*config.traces);
      if (!in) throw ArtifactError("cannot open trace file " + config.traces->string());
      std::string line;
      while (std::getline(in, line))
        if (!line.empty()) run.records.push_back(record_from_json(nlohmann::json::parse(line)));
      run.report = aggregate(run.records, data, model.num_layers(), std::string(strategy_name(strategy)), tau);
    } else {
      run = evaluate(model, data, strategy, tau);
      std::ostringstream traces;
      for (const auto& r : run.records) traces << record_to_json(r).dump() << '\n';
      write_text(config.out_dir / "traces.jsonl", traces.str());
    }
    const auto report = report_to_json(run.report);
    write_text(config.out_dir / "report.json", report.dump(2) + "\n");
    out << report.dump() << '\n';
    return kExitOk;
  });
}

int cmd_sweep(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (config.taus.size() < 2) throw ValidationError("sweep needs at least two thresholds");
    config.validate_taus();
    const MultiExitModel model = load_for_eval(config);
    const auto data = require_dataset(config.eval_data, "evaluation");
    const auto rows = run_sweep(model, data, config.strategies, config.taus);
    const auto path = config.out_dir / "sweep.csv";
    write_sweep_csv(path, rows, model.num_layers());
    out << nlohmann::json{{"sweep", path.string()}, {"rows", rows.size()}}.dump() << '\n';
    return kExitOk;
  });
}

int cmd_ablate(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ModelConfig mc = model_config_or_default(config);
    const auto train_data = require_dataset(config.train_data, "training");
    const auto eval_data = require_dataset(config.eval_data, "evaluation");
    std::vector<std::uint64_t> seeds = config.ablate_seeds;
    if (seeds.empty()) seeds.push_back(config.seed.value_or(config.train.seed));
    const auto variants = ablation_variants();
    const std::vector<Objective> objectives{Objective::avg, Objective::avg_plus_final, Objective::alternating};
    const auto rows = run_ablation(mc, config.train, train_data, eval_data, variants, objectives, seeds);
    const auto path = config.out_dir / "ablation.csv";
    write_ablation_csv(path, rows);
    out << nlohmann::json{{"ablation", path.string()}, {"rows", rows.size()}}.dump() << '\n';
    return kExitOk;
  });
}

int cmd_gen_data(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const std::uint64_t seed = config.seed.value_or(config.train.seed);
    const auto train_set = gen_mixture(config.gen_kinds, config.gen_train_count, seed);
    const auto eval_set = gen_mixture(config.gen_kinds, config.gen_eval_count, seed + 1);
    write_dataset(config.out_dir / "train.jsonl", train_set);
    write_dataset(config.out_dir / "eval.jsonl", eval_set);
    out << nlohmann::json{{"train", (config.out_dir / "train.jsonl").string()},
                          {"eval", (config.out_dir / "eval.jsonl").string()},
                          {"train_count", train_set.size()},
                          {"eval_count", eval_set.size()}}
               .dump()
        << '\n';
    return kExitOk;
  });
}

int cmd_inspect_ckpt(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const MultiExitModel model = load_for_eval(config);
    const auto counts = count_parameters(model.config());
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : model.parameters()) tensors.push_back({{"name", name}, {"shape", t.shape()}});
    out << nlohmann::json{{"config", model.config()},
                          {"parameters",
                           {{"embedding", counts.embedding},
                            {"encoder", counts.encoder},
                            {"decoder", counts.decoder},
                            {"adaptation_module", counts.adaptation_module},
                            {"adaptation_total", counts.adaptation_total},
                            {"head", counts.head},
                            {"heads_total", counts.heads_total},
                            {"total", counts.total}}},
                          {"tensors", tensors}}
               .dump(2)
        << '\n';
    return kExitOk;
  });
}

}  // namespace deed

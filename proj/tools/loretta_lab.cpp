// loretta_lab: data generation, pre-training and evaluation front end.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "loretta/checkpoint.hpp"
#include "loretta/config.hpp"
#include "loretta/datagen.hpp"
#include "loretta/evaluation.hpp"
#include "loretta/training.hpp"

namespace fs = std::filesystem;
using namespace loretta;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ckpt;
  std::string init_from;
  std::string data;
  std::string strategy;
  std::vector<std::string> combos;
  std::optional<std::int64_t> steps;
  std::string table;
  std::optional<int> ckpt_every;
  std::string subset;
  bool dump_defaults = false;
  std::string check;
  // membership
  std::string ref_combo = "B";
  std::string ref_subset = "pair_AB";
  std::optional<double> sigma;
  // probe
  std::optional<int> n_per_class;
  std::optional<int> trials;
  std::string pool;
  // sample / cycle-error
  std::string target;
  std::string link = "B";
  std::string obs = "A";
  int n = 4;
  std::optional<int> n_samples;
  double temperature = 1.0;
  int top_k = 0;
};

RunConfig base_config(const Flags& f) { return f.config.empty() ? RunConfig{} : load_run_config(f.config); }

std::uint64_t require_seed(const Flags& f, const char* cmd) {
  if (!f.seed) throw UsageError(std::string(cmd) + " requires --seed");
  return *f.seed;
}

void require(const std::string& v, const char* flag, const char* cmd) {
  if (v.empty()) throw UsageError(std::string(cmd) + " requires " + flag);
}

std::vector<std::uint32_t> parse_combo(const TokenLayout& layout, const std::string& csv) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    std::uint32_t m = 0;
    try {
      m = layout.modality_index(item);
    } catch (const InputError& e) {
      throw UsageError(e.what());
    }
    if (std::find(out.begin(), out.end(), m) != out.end()) throw UsageError("combo repeats modality " + item);
    out.push_back(m);
  }
  if (out.empty()) throw UsageError("empty --combo");
  return out;
}

std::vector<std::string> combo_names(const TokenLayout& layout, const std::vector<std::uint32_t>& c) {
  std::vector<std::string> out;
  for (auto m : c) out.push_back(layout.name(m));
  return out;
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

// Emits report lines to stdout and, with --out, to that file.
class Reporter {
 public:
  explicit Reporter(const std::string& path) {
    if (!path.empty()) {
      if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
      file_.open(path, std::ios::trunc);
      if (!file_) throw FormatError("cannot write " + path);
    }
  }
  void emit(const nlohmann::json& j) {
    const auto line = j.dump();
    std::cout << line << "\n";
    if (file_.is_open()) file_ << line << "\n";
  }

 private:
  std::ofstream file_;
};

void write_table(const std::string& path, const std::string& header, const std::vector<std::string>& rows) {
  std::string text = header + "\n";
  for (const auto& r : rows) text += r + "\n";
  write_file(path, text);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

struct Loaded {
  Dataset ds;
  Checkpoint ck;
};

Loaded load_eval_inputs(const Flags& f, const char* cmd) {
  require(f.data, "--data", cmd);
  require(f.ckpt, "--ckpt", cmd);
  Loaded l{load_dataset(f.data), Checkpoint::load(f.ckpt)};
  const auto layout = l.ds.layout(l.ck.layout.n_sentinels());
  if (!(layout == l.ck.layout)) throw InputError("checkpoint token layout does not match dataset " + f.data);
  return l;
}

int cmd_gen_data(const Flags& f) {
  auto cfg = base_config(f);
  cfg.data.seed = require_seed(f, "gen-data");
  require(f.out, "--out", "gen-data");
  Dataset ds;
  const int per_class = gen_data(cfg.data, f.out, &ds);
  std::cerr << "gen-data: " << per_class * kNumClasses << " samples -> " << f.out << "\n";
  return 0;
}

int cmd_pretrain(const Flags& f) {
  auto cfg = base_config(f);
  require(f.data, "--data", "pretrain");
  require(f.out, "--out", "pretrain");
  PretrainOptions opt;
  if (!f.ckpt.empty()) {
    opt.resume = f.ckpt;
  } else {
    if (f.strategy.empty()) throw UsageError("pretrain requires --strategy {cm2,c2m3,loretta,gpt}");
    try {
      opt.strategy = parse_strategy(f.strategy);
    } catch (const InputError& e) {
      throw UsageError(e.what());
    }
    cfg.train.seed = require_seed(f, "pretrain");
    if (opt.strategy == Strategy::kLoReTTa && f.init_from.empty())
      throw UsageError(
          "strategy loretta requires a warm start: pass --init-from with a C2M3 checkpoint to initialize LoReTTa");
    if (!f.init_from.empty()) opt.init_from = f.init_from;
    if (f.steps) {
      if (*f.steps < 1) throw UsageError("--steps must be >= 1");
      cfg.train.schedule.total_steps = *f.steps;
      // Keep warmup inside the shortened run.
      cfg.train.schedule.warmup_steps = std::min(cfg.train.schedule.warmup_steps, *f.steps * 15 / 100);
    }
    if (f.ckpt_every) cfg.train.ckpt_every = *f.ckpt_every;
  }
  opt.train = cfg.train;
  opt.model = cfg.model;
  opt.out = f.out;
  const auto ds = load_dataset(f.data);
  const auto res = pretrain(ds, opt);
  std::cerr << "pretrain: " << res.checkpoint.strategy << " finished at step " << res.checkpoint.step << " -> "
            << (fs::path(f.out) / "final.bin").string() << "\n";
  return 0;
}

int cmd_eval_ppl(const Flags& f) {
  auto cfg = base_config(f);
  const auto in = load_eval_inputs(f, "eval-ppl");
  if (f.combos.empty()) throw UsageError("eval-ppl requires --combo");
  const auto& sub = in.ds.subset(f.subset.empty() ? cfg.eval.subset : f.subset);
  Reporter rep(f.out);
  std::vector<std::string> rows;
  for (const auto& c : f.combos) {
    const auto combo = parse_combo(in.ck.layout, c);
    const auto r = perplexity(in.ck.params, in.ck.layout, sub, combo);
    auto line = report_line("ppl", r.combo, r.ppl, r.n_tokens, f.seed.value_or(0), f.ckpt);
    line["mean_nll"] = r.mean_nll;
    line["subset"] = sub.name;
    line["order"] = "canonical";
    rep.emit(line);
    rows.push_back(join(r.combo, "+") + "," + fmt(r.ppl) + "," + fmt(r.mean_nll) + "," + std::to_string(r.n_tokens));
  }
  if (!f.table.empty()) write_table(f.table, "combo,ppl,mean_nll,n_tokens", rows);
  return 0;
}

int cmd_probe(const Flags& f) {
  auto cfg = base_config(f);
  const auto seed = require_seed(f, "probe");
  const auto in = load_eval_inputs(f, "probe");
  if (f.combos.empty()) throw UsageError("probe requires --combo");
  if (f.n_per_class) cfg.eval.probe.n_per_class = *f.n_per_class;
  if (f.trials) cfg.eval.probe.trials = *f.trials;
  const auto& pool = in.ds.subset(f.pool.empty() ? cfg.eval.probe_pool : f.pool);
  const auto& test = in.ds.subset(f.subset.empty() ? cfg.eval.subset : f.subset);
  Reporter rep(f.out);
  std::vector<std::string> rows;
  for (const auto& c : f.combos) {
    const auto combo = parse_combo(in.ck.layout, c);
    std::vector<int> ytr, yte;
    const auto xtr = subset_features(in.ck.params, in.ck.layout, pool, combo, &ytr);
    const auto xte = subset_features(in.ck.params, in.ck.layout, test, combo, &yte);
    const auto r = linear_probe(xtr, ytr, xte, yte, kNumClasses, combo.size(), cfg.eval.probe, seed);
    auto line = report_line("probe", combo_names(in.ck.layout, combo), r.accuracy, 0, seed, f.ckpt);
    line["trial_accuracy"] = r.trial_accuracy;
    line["n_train_per_class"] = r.n_train_per_class;
    rep.emit(line);
    rows.push_back(join(combo_names(in.ck.layout, combo), "+") + "," + fmt(100.0 * r.accuracy));
  }
  if (!f.table.empty()) write_table(f.table, "combo,accuracy_pct", rows);
  return 0;
}

int cmd_membership(const Flags& f) {
  auto cfg = base_config(f);
  const auto in = load_eval_inputs(f, "membership");
  if (f.combos.size() != 1) throw UsageError("membership requires exactly one --combo (the data under test)");
  const auto ci = parse_combo(in.ck.layout, f.combos[0]);
  const auto cj = parse_combo(in.ck.layout, f.ref_combo);
  const auto& si = in.ds.subset(f.subset.empty() ? cfg.eval.subset : f.subset);
  const auto& sj = in.ds.subset(f.ref_subset);
  const auto di = evaluation_sequences(in.ck.layout, si, ci);
  const auto dj = evaluation_sequences(in.ck.layout, sj, cj);
  const auto v = sigma_membership(in.ck.params, std::span<const AssembledSequence>(di),
                                  std::span<const AssembledSequence>(dj), f.sigma.value_or(cfg.eval.sigma));
  Reporter rep(f.out);
  auto line = report_line("membership", combo_names(in.ck.layout, ci), v.ratio, 0, f.seed.value_or(0), f.ckpt);
  line["reference"] = combo_names(in.ck.layout, cj);
  line["subset"] = si.name;
  line["ref_subset"] = sj.name;
  line["nll_i"] = v.nll_i;
  line["nll_j"] = v.nll_j;
  line["sigma"] = v.sigma;
  line["same_modality"] = v.same_modality;
  rep.emit(line);
  if (!f.table.empty())
    write_table(f.table, "data,reference,ratio,same_modality",
                {join(combo_names(in.ck.layout, ci), "+") + "," + join(combo_names(in.ck.layout, cj), "+") + "," +
                 fmt(v.ratio) + "," + (v.same_modality ? "true" : "false")});
  return 0;
}

int cmd_sample(const Flags& f) {
  const auto seed = require_seed(f, "sample");
  const auto in = load_eval_inputs(f, "sample");
  require(f.target, "--target", "sample");
  const auto& layout = in.ck.layout;
  const auto target = layout.modality_index(f.target);
  const auto prefix_combo = f.combos.empty() ? std::vector<std::uint32_t>{} : parse_combo(layout, f.combos[0]);
  const auto& sub = in.ds.subset(f.subset.empty() ? "test" : f.subset);
  SamplingOptions so{f.temperature, f.top_k};
  Rng root(seed);
  Reporter rep(f.out);
  for (int i = 0; i < f.n && static_cast<std::size_t>(i) < sub.records.size(); ++i) {
    const auto& rec = sub.records[static_cast<std::size_t>(i)];
    AssembledSequence prefix;
    for (auto m : prefix_combo) append_segment(prefix, layout, rec.segment(m));
    if (prefix.empty()) throw UsageError("sample requires --combo naming the conditioning modalities");
    Rng r = root.split(static_cast<std::uint64_t>(i));
    const auto g = generate(in.ck.params, layout, prefix, target, in.ds.nominal_length(target), so, r);
    nlohmann::json line = {{"kind", "sample"},   {"record", i},           {"label", rec.label},
                           {"target", f.target}, {"tokens", g.tokens},    {"hit_cap", g.hit_cap},
                           {"seed", seed},       {"ckpt", f.ckpt}};
    if (target == kText && in.ck.tokenizer) {
      std::vector<std::string> words;
      for (auto t : g.tokens) words.push_back(in.ck.tokenizer->vocab.symbol(t));
      line["text"] = join(words, " ");
    }
    rep.emit(line);
  }
  return 0;
}

int cmd_cycle_error(const Flags& f) {
  auto cfg = base_config(f);
  const auto seed = require_seed(f, "cycle-error");
  const auto in = load_eval_inputs(f, "cycle-error");
  const auto& layout = in.ck.layout;
  const auto link = layout.modality_index(f.link);
  const auto obs = layout.modality_index(f.obs);
  if (link == obs) throw UsageError("cycle-error: --link and --obs must differ");
  std::uint32_t missing = 0;
  while (missing == link || missing == obs) ++missing;
  const auto& sub = in.ds.subset(f.subset.empty() ? cfg.eval.subset : f.subset);
  std::vector<std::size_t> max_len;
  for (std::uint32_t m = 0; m < layout.n_modalities(); ++m) max_len.push_back(in.ds.nominal_length(m));
  SamplingOptions so{f.temperature, f.top_k};
  const auto gen = model_generator(in.ck.params, layout, max_len, so);
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(f.n_samples.value_or(cfg.eval.cycle_samples));
  const auto st = cycle_error(layout, sub, link, obs, missing, n, gen, model_scorer(in.ck.params), rng,
                              cfg.eval.bootstrap_resamples);
  Reporter rep(f.out);
  const std::vector<std::string> names = {layout.name(link), layout.name(missing), layout.name(obs)};
  for (const auto& [kind, iv, count] : {std::tuple{"cycle_two_hop", st.two_hop_ci, st.two_hop.size()},
                                        std::tuple{"cycle_one_hop", st.one_hop_ci, st.one_hop.size()}}) {
    auto line = report_line(kind, names, iv.mean, count, seed, f.ckpt);
    line["ci95"] = {iv.lo, iv.hi};
    line["failures"] = st.failures;
    rep.emit(line);
  }
  if (!f.table.empty())
    write_table(f.table, "path,mean_nll,ci_lo,ci_hi,n",
                {join(names, ">") + "," + fmt(st.two_hop_ci.mean) + "," + fmt(st.two_hop_ci.lo) + "," +
                     fmt(st.two_hop_ci.hi) + "," + std::to_string(st.two_hop.size()),
                 names[0] + ">" + names[2] + "," + fmt(st.one_hop_ci.mean) + "," + fmt(st.one_hop_ci.lo) + "," +
                     fmt(st.one_hop_ci.hi) + "," + std::to_string(st.one_hop.size())});
  return 0;
}

int cmd_config(const Flags& f) {
  if (f.dump_defaults) {
    std::cout << RunConfig{}.to_json().dump(2) << "\n";
    return 0;
  }
  if (!f.check.empty()) {
    std::cout << load_run_config(f.check).to_json().dump(2) << "\n";
    return 0;
  }
  throw UsageError("config requires --dump-defaults or --check FILE");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoReTTa laboratory: synthetic tri-modal data, pre-training and evaluation"};
  app.require_subcommand(1);
  Flags f;

  auto shared = [&f](CLI::App* c) {
    c->add_option("--config", f.config, "Run configuration (JSON)");
    c->add_option("--seed", f.seed, "Random seed");
    c->add_option("--out", f.out, "Output directory or report file");
  };
  auto evalflags = [&f](CLI::App* c) {
    c->add_option("--data", f.data, "Dataset directory");
    c->add_option("--ckpt", f.ckpt, "Checkpoint file");
    c->add_option("--subset", f.subset, "Dataset subset to evaluate");
    c->add_option("--table", f.table, "Also write a CSV table to this path");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic tri-modal dataset");
  shared(gen);

  auto* pre = app.add_subcommand("pretrain", "Pre-train a model");
  shared(pre);
  pre->add_option("--data", f.data, "Dataset directory");
  pre->add_option("--strategy", f.strategy, "cm2 | c2m3 | loretta | gpt");
  pre->add_option("--ckpt", f.ckpt, "Resume from this checkpoint");
  pre->add_option("--init-from", f.init_from, "Warm-start weights from this checkpoint");
  pre->add_option("--steps", f.steps, "Total optimization steps");
  pre->add_option("--ckpt-every", f.ckpt_every, "Checkpoint cadence in steps");

  auto* ppl = app.add_subcommand("eval-ppl", "Perplexity per modality combination");
  shared(ppl);
  evalflags(ppl);
  ppl->add_option("--combo", f.combos, "Comma-separated modality names; repeatable");

  auto* probe = app.add_subcommand("probe", "Linear probing on frozen features");
  shared(probe);
  evalflags(probe);
  probe->add_option("--combo", f.combos, "Comma-separated modality names; repeatable");
  probe->add_option("--pool", f.pool, "Labelled subset to draw training samples from");
  probe->add_option("--n-per-class", f.n_per_class, "Training samples per class");
  probe->add_option("--trials", f.trials, "Number of resampled trials");

  auto* mem = app.add_subcommand("membership", "Sigma-membership test");
  shared(mem);
  evalflags(mem);
  mem->add_option("--combo", f.combos, "Modalities of the data under test");
  mem->add_option("--ref-combo", f.ref_combo, "Modalities of the reference data");
  mem->add_option("--ref-subset", f.ref_subset, "Subset holding the reference data");
  mem->add_option("--sigma", f.sigma, "Sigma (default 3)");

  auto* smp = app.add_subcommand("sample", "Generate a modality conditioned on others");
  shared(smp);
  evalflags(smp);
  smp->add_option("--combo", f.combos, "Conditioning modalities");
  smp->add_option("--target", f.target, "Modality to generate");
  smp->add_option("-n,--n", f.n, "Number of records to condition on");
  smp->add_option("--temperature", f.temperature, "Sampling temperature (<= 0: greedy)");
  smp->add_option("--top-k", f.top_k, "Top-k filter (0: off)");

  auto* cyc = app.add_subcommand("cycle-error", "Two-hop versus one-hop generation error");
  shared(cyc);
  evalflags(cyc);
  cyc->add_option("--link", f.link, "Linking modality");
  cyc->add_option("--obs", f.obs, "Observed modality");
  cyc->add_option("-n,--n", f.n_samples, "Number of records");
  cyc->add_option("--temperature", f.temperature, "Sampling temperature");
  cyc->add_option("--top-k", f.top_k, "Top-k filter (0: off)");

  auto* cfg = app.add_subcommand("config", "Print or validate run configurations");
  cfg->add_flag("--dump-defaults", f.dump_defaults, "Print the default configuration");
  cfg->add_option("--check", f.check, "Validate a configuration file and print the merged result");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(f);
    if (*pre) return cmd_pretrain(f);
    if (*ppl) return cmd_eval_ppl(f);
    if (*probe) return cmd_probe(f);
    if (*mem) return cmd_membership(f);
    if (*smp) return cmd_sample(f);
    if (*cyc) return cmd_cycle_error(f);
    if (*cfg) return cmd_config(f);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

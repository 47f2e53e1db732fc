// volformer: synthetic cohorts, preprocessing, labels, splits, training,
// evaluation and profiling behind one subcommand-style binary.
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "manifest.hpp"
#include "volformer/cohort/cohort.hpp"
#include "volformer/data/synth.hpp"
#include "volformer/eval/report.hpp"
#include "volformer/profile/profile.hpp"
#include "volformer/text.hpp"
#include "volformer/train/train.hpp"

namespace {

using namespace volformer;
using namespace vfcli;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Small CSV tables written by this tool (no quoting; cells never hold commas).

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::string source;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ParseError(source + ":1: missing column '" + name + "'");
  }
};

Table read_table(const fs::path& path) {
  Table t;
  t.source = path.string();
  std::istringstream in(read_text(path));
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    auto cells = text::split(line, ',');
    if (t.header.empty()) {
      t.header = cells;
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw ParseError(t.source + ":" + std::to_string(number) + ": expected " + std::to_string(t.header.size()) +
                       " cells, got " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw ParseError(t.source + ": empty table");
  return t;
}

std::string no_commas(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  return s;
}

// Knee rows of splits.csv.
struct SplitRow {
  std::string knee_id;
  int label = 0;
  std::string split;  // "eval" or a fold index
};

std::vector<SplitRow> read_splits(const fs::path& path) {
  const auto t = read_table(path);
  const auto id = t.column("knee_id"), label = t.column("label"), split = t.column("split");
  std::vector<SplitRow> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    std::uint64_t l = 0;
    if (!text::parse_u64(t.rows[i][label], l) || l > 2) {
      throw ParseError(t.source + ":" + std::to_string(i + 2) + ": label must be 0, 1 or 2");
    }
    out.push_back({t.rows[i][id], static_cast<int>(l), t.rows[i][split]});
  }
  return out;
}

std::size_t fold_count(const std::vector<SplitRow>& rows, const std::string& source) {
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.split == "eval") continue;
    std::size_t f = 0;
    if (!text::parse_size(r.split, f)) throw ParseError(source + ": unknown split '" + r.split + "' for " + r.knee_id);
    n = std::max(n, f + 1);
  }
  if (n == 0) throw DataError(source + ": no training folds");
  return n;
}

std::vector<train::Sample> load_samples(const std::vector<SplitRow>& rows, const fs::path& volumes,
                                        const models::ModelConfig& cfg) {
  std::vector<train::Sample> out;
  for (const auto& r : rows) {
    const auto path = volumes / (r.knee_id + ".vvol");
    require_file(path, "volume of knee " + r.knee_id);
    out.push_back(train::make_sample(data::load_volume(path.string()), r.knee_id, r.label, cfg));
  }
  return out;
}

std::size_t thread_cap() {
  const char* env = std::getenv("VOLFORMER_THREADS");
  if (!env) return std::numeric_limits<std::size_t>::max();
  std::size_t n = 0;
  if (!text::parse_size(env, n) || n == 0) throw ConfigError("VOLFORMER_THREADS must be a positive integer, got '" + std::string(env) + "'");
  return n;
}

std::array<std::size_t, 3> parse_triple(const std::string& s, const std::string& flag) {
  std::vector<std::size_t> d;
  if (!text::parse_dims(s, d) || d.size() != 3) throw ConfigError(flag + ": expected AxBxC, got '" + s + "'");
  return {d[0], d[1], d[2]};
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t subjects = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  if (a.subjects == 0) throw ConfigError("--subjects must be positive");
  const data::SynthConfig cfg;
  const auto knees = data::synth_generate(a.subjects, a.seed, cfg);
  StagedDir out(a.out);
  fs::create_directories(out.path() / "volumes");
  std::vector<cohort::KneeRecord> records;
  std::string planted = "knee_id,planted_class,planted_exclusion\n";
  for (const auto& k : knees) {
    records.push_back(k.record);
    planted += k.record.knee_id() + "," + std::to_string(k.planted_class) + "," + k.planted_exclusion + "\n";
    data::save_volume(data::render_phantom(k, cfg), (out.path() / "volumes" / (k.record.knee_id() + ".vvol")).string());
  }
  write_text(out.path() / "cohort.csv", cohort::format_cohort_csv(records));
  write_text(out.path() / "planted.csv", planted);
  Manifest m("synth");
  m.argument("subjects", a.subjects);
  m.argument("seed", a.seed);
  m.argument("out", a.out);
  m.result("knees", knees.size());
  m.write(out.path());
  out.commit();
  std::cout << "synth: " << knees.size() << " knees of " << a.subjects << " subjects in " << a.out << "\n";
  return 0;
}

struct PreprocessArgs {
  std::string volumes, out, preset = "full", crop, factors;
};

int run_preprocess(const PreprocessArgs& a) {
  data::PreprocessConfig cfg;
  if (a.preset == "toy") {
    cfg = data::PreprocessConfig::toy();
  } else if (a.preset != "full") {
    throw ConfigError("--preset must be full or toy, got '" + a.preset + "'");
  }
  if (!a.crop.empty()) cfg.crop = parse_triple(a.crop, "--crop");
  if (!a.factors.empty()) cfg.factors = parse_triple(a.factors, "--factors");
  require_dir(a.volumes, "volume directory");
  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(a.volumes))
    if (e.is_regular_file() && e.path().extension() == ".vvol") inputs.push_back(e.path());
  std::sort(inputs.begin(), inputs.end());
  if (inputs.empty()) throw DataError("no .vvol files in " + a.volumes);
  StagedDir out(a.out);
  for (const auto& p : inputs) {
    const auto v = data::preprocess(data::load_volume(p.string()), cfg);
    data::save_volume(v, (out.path() / p.filename()).string());
  }
  Manifest m("preprocess");
  m.argument("volumes", a.volumes);
  m.argument("out", a.out);
  m.argument("crop", text::format_dims({cfg.crop.begin(), cfg.crop.end()}));
  m.argument("factors", text::format_dims({cfg.factors.begin(), cfg.factors.end()}));
  m.input_dir(a.volumes);
  m.result("volumes", inputs.size());
  m.write(out.path());
  out.commit();
  std::cout << "preprocess: " << inputs.size() << " volumes to " << a.out << "\n";
  return 0;
}

struct LabelArgs {
  std::string cohort, volumes, out;
};

int run_label(const LabelArgs& a) {
  require_file(a.cohort, "cohort file");
  auto records = cohort::load_cohort_csv(a.cohort);
  if (!a.volumes.empty()) {
    require_dir(a.volumes, "volume directory");
    for (auto& r : records) r.has_mri = fs::is_regular_file(fs::path(a.volumes) / (r.knee_id() + ".vvol"));
  }
  const auto ex = cohort::apply_exclusions(records);
  std::string labels = "knee_id,subject_id,side,institution_id,label,class,event_month,rule_trace\n";
  for (const auto& k : ex.kept) {
    const auto& r = records[k.index];
    labels += r.knee_id() + "," + r.subject_id + "," + r.side + "," + r.institution_id + "," +
              std::to_string(k.label.cls) + "," + cohort::class_name(k.label.cls) + "," +
              (k.label.event_month ? std::to_string(*k.label.event_month) : "") + "," + no_commas(k.label.rule_trace) + "\n";
  }
  std::string excluded = "knee_id,reason\n";
  std::map<std::string, std::size_t> counts;
  for (const auto& [index, reason] : ex.excluded) {
    excluded += records[index].knee_id() + "," + reason + "\n";
    ++counts[reason];
  }
  StagedDir out(a.out);
  write_text(out.path() / "labels.csv", labels);
  write_text(out.path() / "exclusions.csv", excluded);
  Manifest m("label");
  m.argument("cohort", a.cohort);
  m.argument("volumes", a.volumes);
  m.argument("out", a.out);
  m.input_file(a.cohort);
  m.result("kept", ex.kept.size());
  m.result("excluded", counts);
  m.write(out.path());
  out.commit();
  std::cout << "label: " << ex.kept.size() << " knees labeled, " << ex.excluded.size() << " excluded\n";
  return 0;
}

struct SplitArgs {
  std::string labels, holdout = "E", out;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
};

int run_split(const SplitArgs& a) {
  require_file(a.labels, "label file");
  const auto t = read_table(a.labels);
  const auto id = t.column("knee_id"), subject = t.column("subject_id"), side = t.column("side"),
             site = t.column("institution_id"), label = t.column("label");
  std::vector<cohort::KneeRecord> records;
  std::vector<int> labels;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    std::uint64_t l = 0;
    if (!text::parse_u64(row[label], l) || l > 2 || (row[side] != "L" && row[side] != "R")) {
      throw ParseError(t.source + ":" + std::to_string(i + 2) + ": malformed label row");
    }
    cohort::KneeRecord r;
    r.subject_id = row[subject];
    r.side = row[side][0];
    r.institution_id = row[site];
    if (r.knee_id() != row[id]) throw ParseError(t.source + ":" + std::to_string(i + 2) + ": knee_id does not match subject and side");
    records.push_back(r);
    labels.push_back(static_cast<int>(l));
  }
  const auto splits = cohort::split_dataset(records, labels, a.holdout, a.folds, a.seed);
  std::vector<std::string> assignment(records.size());
  for (auto i : splits.eval) assignment[i] = "eval";
  for (std::size_t f = 0; f < splits.folds.size(); ++f)
    for (auto i : splits.folds[f]) assignment[i] = std::to_string(f);
  std::string csv = "knee_id,subject_id,institution_id,label,split\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    csv += records[i].knee_id() + "," + records[i].subject_id + "," + records[i].institution_id + "," +
           std::to_string(labels[i]) + "," + assignment[i] + "\n";
  }
  StagedDir out(a.out);
  write_text(out.path() / "splits.csv", csv);
  Manifest m("split");
  m.argument("labels", a.labels);
  m.argument("holdout", a.holdout);
  m.argument("folds", a.folds);
  m.argument("seed", a.seed);
  m.argument("out", a.out);
  m.input_file(a.labels);
  m.result("eval_knees", splits.eval.size());
  m.write(out.path());
  out.commit();
  std::cout << "split: " << splits.eval.size() << " hold-out knees, " << a.folds << " folds\n";
  return 0;
}

struct TrainArgs {
  std::string config, train_config, splits, volumes, out;
  std::optional<std::size_t> fold;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::size_t parallel_folds = 1;
  bool verbose = false;
};

int run_train(const TrainArgs& a) {
  require_file(a.config, "model config");
  if (!a.train_config.empty()) require_file(a.train_config, "train config");
  require_file(a.splits, "split file");
  require_dir(a.volumes, "volume directory");
  const auto cfg = models::ModelConfig::load(a.config);
  auto tcfg = a.train_config.empty() ? train::TrainConfig{} : train::TrainConfig::load(a.train_config);
  if (a.seed) tcfg.seed = *a.seed;
  if (a.epochs) tcfg.epochs = *a.epochs;
  tcfg.validate();
  if (a.parallel_folds == 0) throw ConfigError("--parallel-folds must be positive");

  const auto rows = read_splits(a.splits);
  const auto n_folds = fold_count(rows, a.splits);
  std::vector<std::size_t> folds;
  if (a.fold) {
    if (*a.fold >= n_folds) throw ConfigError("--fold " + std::to_string(*a.fold) + " out of range for " + std::to_string(n_folds) + " folds");
    folds.push_back(*a.fold);
  } else {
    for (std::size_t f = 0; f < n_folds; ++f) folds.push_back(f);
  }
  std::vector<SplitRow> pool;
  for (const auto& r : rows)
    if (r.split != "eval") pool.push_back(r);
  const auto samples = load_samples(pool, a.volumes, cfg);

  fs::create_directories(a.out);
  std::mutex log_mu;
  auto train_one = [&](std::size_t i) {
    const std::size_t f = folds[i];
    std::vector<train::Sample> tr, val;
    for (std::size_t j = 0; j < pool.size(); ++j) (pool[j].split == std::to_string(f) ? val : tr).push_back(samples[j]);
    StagedDir dir(fs::path(a.out) / ("fold" + std::to_string(f)));
    Manifest m("train");
    m.argument("config", a.config);
    m.argument("train_config", a.train_config);
    m.argument("splits", a.splits);
    m.argument("volumes", a.volumes);
    m.argument("out", a.out);
    m.argument("fold", f);
    m.config("model", cfg.dump());
    m.config("train", tcfg.dump());
    m.input_file(a.config);
    m.input_file(a.splits);
    m.input_dir(a.volumes);
    m.result("train_knees", tr.size());
    m.result("val_knees", val.size());
    auto log = [&](const train::EpochRecord& r) {
      if (!a.verbose) return;
      std::lock_guard lock(log_mu);
      std::cerr << "fold " << f << " epoch " << r.epoch << " loss " << r.train_loss << " val_ap " << r.val_ap << "\n";
    };
    try {
      const auto result = train::train_fold<float>(cfg, tr, val, tcfg, f, log);
      write_text(dir.path() / "history.csv", train::history_csv(result.history));
      save_checkpoint((dir.path() / "snapshot.vfwt").string(), result.best.state);
      m.result("status", "completed");
      m.result("snapshot_epoch", result.best.epoch);
      m.result("snapshot_val_ap", std::isnan(result.best.val_ap) ? ordered_json() : ordered_json(result.best.val_ap));
      m.result("clamped_probabilities", result.clamped);
      m.write(dir.path());
      dir.commit();
      std::lock_guard lock(log_mu);
      std::cout << "train: fold " << f << " best epoch " << result.best.epoch << ", validation AP "
                << text::format_double(result.best.val_ap) << "\n";
    } catch (const train::TrainingDiverged& e) {
      write_text(dir.path() / "history.csv", train::history_csv(e.history));
      m.result("status", "diverged");
      m.result("error", e.what());
      m.write(dir.path());
      dir.commit();
      throw;
    }
  };
  train::parallel_for(folds.size(), std::min(a.parallel_folds, thread_cap()), train_one);
  return 0;
}

struct EvaluateArgs {
  std::string config, runs, splits, volumes, predictions, out, split = "eval";
  std::size_t n_boot = 1000;
  std::uint64_t seed = 0;
};

int run_evaluate(const EvaluateArgs& a) {
  Manifest m("evaluate");
  eval::PredictionSet preds;
  if (!a.predictions.empty()) {
    require_file(a.predictions, "prediction file");
    preds = eval::parse_predictions_csv(read_text(a.predictions), a.predictions);
    m.input_file(a.predictions);
  } else {
    if (a.config.empty() || a.runs.empty() || a.splits.empty() || a.volumes.empty()) {
      throw ConfigError("evaluate needs --predictions, or all of --config, --runs, --splits and --volumes");
    }
    require_file(a.config, "model config");
    require_dir(a.runs, "training run directory");
    require_file(a.splits, "split file");
    require_dir(a.volumes, "volume directory");
    const auto cfg = models::ModelConfig::load(a.config);
    std::vector<fs::path> fold_dirs;
    for (const auto& e : fs::directory_iterator(a.runs)) {
      const auto name = e.path().filename().string();
      if (e.is_directory() && name.rfind("fold", 0) == 0 && name.find(".partial") == std::string::npos) fold_dirs.push_back(e.path());
    }
    std::sort(fold_dirs.begin(), fold_dirs.end());
    std::vector<train::Snapshot> snaps;
    for (const auto& d : fold_dirs) {
      if (!fs::is_regular_file(d / "snapshot.vfwt")) continue;
      snaps.push_back({0, 0, load_checkpoint((d / "snapshot.vfwt").string())});
      m.upstream(d / "manifest.json");
    }
    if (snaps.empty()) throw DataError("no fold snapshots under " + a.runs);
    std::vector<SplitRow> rows;
    for (const auto& r : read_splits(a.splits))
      if (r.split == a.split) rows.push_back(r);
    if (rows.empty()) throw DataError(a.splits + ": no knees in split '" + a.split + "'");
    preds = train::ensemble_predict<float>(cfg, snaps, load_samples(rows, a.volumes, cfg));
    m.config("model", cfg.dump());
    m.input_file(a.config);
    m.input_file(a.splits);
    m.input_dir(a.volumes);
    m.result("ensemble_size", snaps.size());
  }
  const auto report = eval::evaluate_predictions(preds, a.n_boot, a.seed);
  StagedDir out(a.out);
  write_text(out.path() / "predictions.csv", eval::predictions_csv(preds));
  write_text(out.path() / "report.json", eval::report_json(report));
  m.argument("config", a.config);
  m.argument("runs", a.runs);
  m.argument("splits", a.splits);
  m.argument("volumes", a.volumes);
  m.argument("predictions", a.predictions);
  m.argument("split", a.split);
  m.argument("n_boot", a.n_boot);
  m.argument("seed", a.seed);
  m.argument("out", a.out);
  m.result("average_precision", report.ap);
  m.result("roc_auc", report.roc_auc);
  m.result("prevalence", report.prevalence);
  m.write(out.path());
  out.commit();
  std::cout << "evaluate: " << report.knees << " knees, prevalence " << text::format_double(report.prevalence)
            << ", AP " << text::format_double(report.ap) << " +- " << text::format_double(report.ap_spread.std)
            << ", ROC AUC " << text::format_double(report.roc_auc) << "\n";
  return 0;
}

struct CurvesArgs {
  std::string predictions, out;
};

int run_curves(const CurvesArgs& a) {
  require_file(a.predictions, "prediction file");
  const auto preds = eval::parse_predictions_csv(read_text(a.predictions), a.predictions);
  eval::EvalReport r;
  const auto scores = preds.pooled();
  const auto y = preds.binary_labels();
  r.roc = eval::roc_curve(scores, y);
  r.pr = eval::pr_curve(scores, y);
  r.confusion = eval::confusion(preds.predicted(), preds.labels);
  StagedDir out(a.out);
  eval::write_curves(r, out.path().string());
  Manifest m("curves");
  m.argument("predictions", a.predictions);
  m.argument("out", a.out);
  m.input_file(a.predictions);
  m.write(out.path());
  out.commit();
  std::cout << "curves: " << r.roc.size() << " ROC points, " << r.pr.size() << " PR points in " << a.out << "\n";
  return 0;
}

struct ProfileArgs {
  std::string config, input, out;
  bool time = false;
  std::size_t warmup = 5, runs = 30;
};

int run_profile(const ProfileArgs& a) {
  require_file(a.config, "model config");
  auto cfg = models::ModelConfig::load(a.config);
  if (!a.input.empty()) cfg = profile::apply_input_spec(cfg, a.input);
  const auto costs = profile::count_costs(cfg);
  std::optional<profile::TimingReport> timing;
  if (a.time) timing = profile::time_inference(cfg, a.warmup, a.runs);
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text(out, profile::report_json(costs, timing ? &*timing : nullptr));
  Manifest m("profile");
  m.argument("config", a.config);
  m.argument("input", a.input);
  m.argument("out", a.out);
  m.argument("time", a.time);
  m.config("model", cfg.dump());
  m.input_file(a.config);
  m.result("macs", costs.total_macs);
  m.result("params", costs.total_params);
  fs::path manifest_path = out;
  manifest_path.replace_extension(".manifest.json");
  // A timed report differs run to run, so only a timing-free one is hashed.
  std::vector<fs::path> listed;
  if (!a.time) listed.push_back(out.filename());
  m.write_listing(manifest_path, listed);
  std::cout << "profile: " << costs.family << " " << costs.input << ": " << text::format_double(costs.total_macs / 1e9)
            << " GMACs, " << text::format_double(costs.total_params / 1e6) << " M params";
  if (timing) {
    std::cout << (timing->runnable ? ", median " + text::format_double(timing->median_ms) + " ms"
                                   : ", " + timing->reason);
  }
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knee OA progression toolkit: slice-wise CNN + Transformer on knee MRI volumes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("volformer ") + kVersion);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic cohort with phantom volumes");
  s->add_option("--subjects", synth.subjects, "Number of subjects (two knees each)")->required();
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--out", synth.out, "Output directory")->required();

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "Crop, quantize and downsample sagittal volumes");
  p->add_option("--volumes", pre.volumes, "Directory of raw .vvol files")->required();
  p->add_option("--out", pre.out, "Output directory")->required();
  p->add_option("--preset", pre.preset, "full (320x320x128 crop) or toy (64x64x16 crop)");
  p->add_option("--crop", pre.crop, "Override the crop, e.g. 320x320x128");
  p->add_option("--factors", pre.factors, "Override the downsampling factors, e.g. 2x2x2");

  LabelArgs label;
  auto* l = app.add_subcommand("label", "Derive progression labels and apply exclusions");
  l->add_option("--cohort", label.cohort, "Cohort CSV")->required();
  l->add_option("--volumes", label.volumes, "Volume directory; knees without a volume are excluded");
  l->add_option("--out", label.out, "Output directory")->required();

  SplitArgs split;
  auto* sp = app.add_subcommand("split", "Hold out one institution and build subject-wise folds");
  sp->add_option("--labels", split.labels, "labels.csv from the label command")->required();
  sp->add_option("--holdout", split.holdout, "Hold-out institution id");
  sp->add_option("--folds", split.folds, "Number of cross-validation folds");
  sp->add_option("--seed", split.seed, "Random seed");
  sp->add_option("--out", split.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one model per fold and keep the best-AP snapshot");
  t->add_option("--config", tr.config, "Model config")->required();
  t->add_option("--train-config", tr.train_config, "Training config (defaults otherwise)");
  t->add_option("--splits", tr.splits, "splits.csv from the split command")->required();
  t->add_option("--volumes", tr.volumes, "Preprocessed volume directory")->required();
  t->add_option("--out", tr.out, "Run directory (one fold<i> subdirectory per fold)")->required();
  t->add_option("--fold", tr.fold, "Train only this fold");
  t->add_option("--seed", tr.seed, "Override the training seed");
  t->add_option("--epochs", tr.epochs, "Override the epoch budget");
  t->add_option("--parallel-folds", tr.parallel_folds, "Folds trained concurrently (capped by VOLFORMER_THREADS)");
  t->add_flag("--verbose", tr.verbose, "Log every epoch to stderr");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Ensemble fold snapshots and report AP, ROC AUC and the confusion matrix");
  e->add_option("--config", ev.config, "Model config");
  e->add_option("--runs", ev.runs, "Run directory of the train command");
  e->add_option("--splits", ev.splits, "splits.csv");
  e->add_option("--volumes", ev.volumes, "Preprocessed volume directory");
  e->add_option("--split", ev.split, "Split to evaluate: eval or a fold index");
  e->add_option("--predictions", ev.predictions, "Evaluate an existing predictions.csv instead");
  e->add_option("--n-boot", ev.n_boot, "Bootstrap replicates");
  e->add_option("--seed", ev.seed, "Bootstrap seed");
  e->add_option("--out", ev.out, "Output directory")->required();

  CurvesArgs cv;
  auto* c = app.add_subcommand("curves", "Write ROC, PR and confusion tables from predictions");
  c->add_option("--predictions", cv.predictions, "predictions.csv")->required();
  c->add_option("--out", cv.out, "Output directory")->required();

  ProfileArgs pr;
  auto* pf = app.add_subcommand("profile", "Count MACs and parameters, optionally time inference");
  pf->add_option("--config", pr.config, "Model config")->required();
  pf->add_option("--input", pr.input, "Input spec, e.g. 64x160x160 or sag=64x160x160,cor=160x116x88");
  pf->add_option("--out", pr.out, "Report path (JSON)")->required();
  pf->add_flag("--time", pr.time, "Also time single-sample inference");
  pf->add_option("--warmup", pr.warmup, "Discarded timing runs");
  pf->add_option("--runs", pr.runs, "Measured timing runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*s) return run_synth(synth);
    if (*p) return run_preprocess(pre);
    if (*l) return run_label(label);
    if (*sp) return run_split(split);
    if (*t) return run_train(tr);
    if (*e) return run_evaluate(ev);
    if (*c) return run_curves(cv);
    if (*pf) return run_profile(pr);
  } catch (const DivergenceError& err) {
    std::cerr << "volformer " << command << ": diverged: " << err.what() << "\n";
    return 4;
  } catch (const DataError& err) {
    std::cerr << "volformer " << command << ": data error: " << err.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "volformer " << command << ": data error: " << err.what() << "\n";
    return 3;
  } catch (const Error& err) {
    // Config, usage and shape errors.
    std::cerr << "volformer " << command << ": config error: " << err.what() << "\n";
    return 2;
  }
  return 2;
}

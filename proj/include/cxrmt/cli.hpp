#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cxrmt/agreement.hpp"
#include "cxrmt/band.hpp"
#include "cxrmt/manifest.hpp"
#include "cxrmt/metrics.hpp"
#include "cxrmt/model.hpp"
#include "cxrmt/normalize.hpp"
#include "cxrmt/synth.hpp"
#include "cxrmt/training.hpp"

namespace cxrmt {

inline void to_json(nlohmann::json& j, const NormalizationParams& p) {
  j = {{"bins", p.bins}, {"gaussian_sigma", p.gaussian_sigma}, {"median_window", p.median_window}, {"tail_mass", p.tail_mass}};
}

inline void from_json(const nlohmann::json& j, NormalizationParams& p) {
  if (j.contains("bins")) j.at("bins").get_to(p.bins);
  if (j.contains("gaussian_sigma")) j.at("gaussian_sigma").get_to(p.gaussian_sigma);
  if (j.contains("median_window")) j.at("median_window").get_to(p.median_window);
  if (j.contains("tail_mass")) j.at("tail_mass").get_to(p.tail_mass);
}

inline void to_json(nlohmann::json& j, const SplitFractions& f) { j = {{"train", f.train}, {"val", f.val}, {"test", f.test}}; }

inline void from_json(const nlohmann::json& j, SplitFractions& f) {
  if (j.contains("train")) j.at("train").get_to(f.train);
  if (j.contains("val")) j.at("val").get_to(f.val);
  if (j.contains("test")) j.at("test").get_to(f.test);
}

// Everything a train/eval/sweep run depends on besides its input files. The
// model and training seeds are derived from the root seed.
struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainConfig train;
  SplitFractions split;
  NormalizationParams normalization;

  void derive_seeds() {
    model.seed = derive_seed(seed, "model");
    train.seed = derive_seed(seed, "train");
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"seed", c.seed}, {"model", c.model}, {"train", c.train}, {"split", c.split}, {"normalization", c.normalization}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  static const std::set<std::string> known{"seed", "model", "train", "split", "normalization"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("unknown config section '" + it.key() + "'");
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("split")) j.at("split").get_to(c.split);
  if (j.contains("normalization")) j.at("normalization").get_to(c.normalization);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

namespace cli_detail {

inline std::filesystem::path out_dir() {
  const char* env = std::getenv("CXRMT_OUT_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("cxrmt_out");
}

inline std::string cell(double v) { return std::isnan(v) ? "" : csv::format(v); }

inline std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  for (const auto& f : csv::split(text)) out.push_back(csv::parse_double(f, "argument", 0));
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw Error("cannot write " + path.string());
  o << text;
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, max_steps, size;
  std::string losses;
};

inline RunConfig resolve_config(const std::string& path, const Overrides& o) {
  RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
  if (o.seed) c.seed = *o.seed;
  if (o.epochs) c.train.max_epochs = *o.epochs;
  if (o.max_steps) c.train.max_steps = *o.max_steps;
  if (o.size) c.model.input_size = *o.size;
  if (!o.losses.empty()) c.train.enabled_losses = parse_losses(o.losses);
  c.derive_seeds();
  return c;
}

struct Dataset {
  Taxonomy tax = default_taxonomy();
  std::vector<LabeledSample> samples;
  SplitPlan plan;

  PreparedSet prepare(std::optional<Partition> p, std::size_t n, const NormalizationParams& norm) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (!p || plan.sample[i] == *p) idx.push_back(i);
    return prepare_set(samples, idx, n, norm);
  }
};

inline Dataset load_dataset(const std::string& manifest, const RunConfig& cfg) {
  Dataset d;
  if (cfg.model.num_abnormality_classes != d.tax.num_classes())
    throw ConfigError("model.num_abnormality_classes must equal the taxonomy size " + std::to_string(d.tax.num_classes()));
  d.samples = load_manifest(manifest, d.tax);
  d.plan = split_by_patient(d.samples, cfg.split, cfg.seed);
  return d;
}

inline std::filesystem::path sibling(const std::filesystem::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix);
}

// ---- subcommands ----

struct SynthArgs {
  std::size_t n = 64, count = 200;
  std::uint64_t seed = 1;
  double b_fraction = 0.5, seg_fraction = 1.0;
  std::string out;
};

inline int run_synth(const SynthArgs& a, std::ostream& out) {
  auto spec = default_synthetic_spec(a.n, a.count, a.seed);
  spec.dataset_b_fraction = a.b_fraction;
  spec.seg_fraction = a.seg_fraction;
  const std::filesystem::path dir = a.out.empty() ? out_dir() / "corpus" : std::filesystem::path(a.out);
  const auto corpus = generate_corpus(spec);
  write_corpus(corpus, dir);
  out << "wrote " << corpus.images.size() << " images to " << dir.string() << "\n";
  return 0;
}

struct NormalizeArgs {
  std::string in, out;
  NormalizationParams params;
  int bits = 16;
  std::uint64_t seed = 0;
};

inline int run_normalize(const NormalizeArgs& a, std::ostream& out) {
  const std::filesystem::path dst = a.out.empty() ? out_dir() / "normalized" : std::filesystem::path(a.out);
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(a.in)) {
    const auto ext = detail::lower_ext(e.path());
    if (e.is_regular_file() && (ext == ".png" || ext == ".pgm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::filesystem::create_directories(dst);
  for (const auto& f : files) write_image(dst / f.filename(), normalize_image(read_image(f), a.params), a.bits);
  out << "normalized " << files.size() << " images into " << dst.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string manifest, config, out;
  Overrides o;
};

inline int run_train(const TrainArgs& a, std::ostream& out) {
  const auto cfg = resolve_config(a.config, a.o);
  const std::filesystem::path ckpt = a.out.empty() ? out_dir() / "model.ckpt" : std::filesystem::path(a.out);
  const std::string echo = nlohmann::json(cfg).dump(2) + "\n";
  out << echo;
  const auto data = load_dataset(a.manifest, cfg);
  const auto n = cfg.model.input_size;
  const auto train_set = data.prepare(Partition::train, n, cfg.normalization);
  const auto val_set = data.prepare(Partition::val, n, cfg.normalization);
  out << "train " << train_set.size() << " images, val " << val_set.size() << " images\n";
  Model model(cfg.model);
  const auto result = train(model, train_set, val_set, cfg.train);
  for (const auto& e : result.history)
    out << "epoch " << e.epoch << " train_loss " << csv::format(e.train_loss) << " val_loss " << csv::format(e.val_loss)
        << " lr " << csv::format(e.lr) << (e.lr_reduced ? " (reduced)" : "") << "\n";
  save_checkpoint(model, ckpt);
  write_history(sibling(ckpt, ".history.csv"), result, data.tax.qualified_names());
  write_text(sibling(ckpt, ".config.json"), echo);
  out << "wrote " << ckpt.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, manifest, config, split = "test", out, scores;
  std::size_t resamples = 1000;
  double alpha = 0.05;
  Overrides o;
};

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  const auto cfg = resolve_config(a.config, a.o);
  auto model = load_checkpoint(a.ckpt);
  std::optional<Partition> part;
  if (a.split == "train") part = Partition::train;
  else if (a.split == "val") part = Partition::val;
  else if (a.split == "test") part = Partition::test;
  const auto data = load_dataset(a.manifest, cfg);
  const auto set = data.prepare(part, model.config().input_size, cfg.normalization);
  if (set.size() == 0) throw ConfigError("eval: the " + a.split + " partition is empty");
  const auto scored = scored_set(set, predict_probabilities(model, set), data.tax);
  const auto rows = per_class_auc(scored, a.resamples, a.alpha, derive_seed(cfg.seed, "bootstrap"));

  const std::filesystem::path metrics = a.out.empty() ? out_dir() / ("metrics_" + a.split + ".csv") : std::filesystem::path(a.out);
  const std::filesystem::path scores =
      a.scores.empty() ? metrics.parent_path() / ("scores_" + a.split + ".csv") : std::filesystem::path(a.scores);
  write_scores(scores, score_rows(scored));
  std::vector<std::vector<std::string>> table;
  for (const auto& r : rows)
    table.push_back({r.abnormality, std::to_string(r.positives), std::to_string(r.negatives), cell(r.auc), cell(r.ci.low),
                     cell(r.ci.high)});
  table.push_back({"mean", "", "", cell(mean_auc(rows)), "", ""});
  csv::write(metrics, {"abnormality", "positives", "negatives", "auc", "ci_low", "ci_high"}, table);
  out << a.split << ": " << set.size() << " images, mean AUC " << cell(mean_auc(rows)) << "\n";
  out << "wrote " << metrics.string() << " and " << scores.string() << "\n";
  return 0;
}

struct AgreeArgs {
  std::string annotations, original = "original", out;
  std::uint64_t seed = 0;
};

inline int run_agree(const AgreeArgs& a, std::ostream& out) {
  const auto m = load_annotations(a.annotations, a.original);
  const auto rows = agreement_report(m);
  std::vector<std::vector<std::string>> table;
  double sums[4] = {0, 0, 0, 0};
  std::size_t counts[4] = {0, 0, 0, 0};
  for (const auto& r : rows) {
    table.push_back({r.abnormality, std::to_string(r.counts.positive), std::to_string(r.counts.negative),
                     std::to_string(r.counts.no_agreement), cell(r.ppa), cell(r.npa), cell(r.pd), cell(r.kappa)});
    const double v[4] = {r.ppa, r.npa, r.pd, r.kappa};
    for (int i = 0; i < 4; ++i)
      if (!std::isnan(v[i])) sums[i] += v[i], ++counts[i];
  }
  std::vector<std::string> mean{"mean", "", "", ""};
  for (int i = 0; i < 4; ++i) mean.push_back(counts[i] ? csv::format(sums[i] / double(counts[i])) : "");
  table.push_back(mean);
  const std::filesystem::path path = a.out.empty() ? out_dir() / "agreement.csv" : std::filesystem::path(a.out);
  csv::write(path, {"abnormality", "pos_agreement", "neg_agreement", "no_agreement", "ppa", "npa", "pd", "kappa"}, table);
  out << m.cases() << " cases, " << m.abnormalities() << " abnormalities, " << m.readers() << " readers\n";
  out << "wrote " << path.string() << "\n";
  return 0;
}

struct BandArgs {
  std::string val_scores, test_scores, annotations, original = "original", out;
  double ltp = 20, ltn = 20;
  std::uint64_t seed = 0;
};

inline int run_band(const BandArgs& a, std::ostream& out) {
  const auto val = scored_set(load_scores(a.val_scores));
  const auto test_all = scored_set(load_scores(a.test_scores));
  std::optional<ReaderMatrix> readers;
  if (!a.annotations.empty()) readers = load_annotations(a.annotations, a.original);

  std::map<std::string, BandParams> calibrated;
  for (std::size_t k = 0; k < val.classes.size(); ++k) {
    try {
      calibrated[val.classes[k]] = calibrate_band(val.scores[k], val.labels[k], a.ltp, a.ltn);
    } catch (const UndefinedMetricError& e) {
      out << "skipped " << val.classes[k] << ": " << e.what() << "\n";
    }
  }
  ScoredSet test;
  std::vector<BandParams> params;
  for (std::size_t k = 0; k < test_all.classes.size(); ++k) {
    auto it = calibrated.find(test_all.classes[k]);
    if (it == calibrated.end()) continue;
    for (std::size_t i = 0; i < test_all.scores[k].size(); ++i)
      test.add(test_all.case_ids[k][i], test_all.classes[k], test_all.scores[k][i], test_all.labels[k][i]);
    params.push_back(it->second);
  }
  const auto rows = band_report(test, params, readers ? &*readers : nullptr);

  std::vector<std::vector<std::string>> table;
  for (const auto& r : rows) {
    const auto& p = r.params;
    auto base = [&](const std::string& cat) {
      return std::vector<std::string>{r.abnormality, cat, csv::format(p.threshold), csv::format(p.rho_neg), csv::format(p.rho_pos)};
    };
    auto row = base("all");
    for (auto s : {std::to_string(r.total), std::to_string(r.retained),
                   cell(r.total ? 100.0 * double(r.retained) / double(r.total) : std::nan("")), cell(r.auc_full),
                   cell(r.auc_reduced)})
      row.push_back(s);
    table.push_back(row);
    if (!readers) continue;
    const auto& names = readers->abnormality_names();
    if (std::find(names.begin(), names.end(), r.abnormality) == names.end()) continue;
    for (std::size_t c = 0; c < 4; ++c) {
      auto crow = base(category_name(static_cast<ConfidenceCategory>(c)));
      for (auto s : {std::to_string(r.before[c]), std::to_string(r.after[c]), cell(r.retention(c)), std::string(), std::string()})
        crow.push_back(s);
      table.push_back(crow);
    }
  }
  const std::filesystem::path path = a.out.empty() ? out_dir() / "band_report.csv" : std::filesystem::path(a.out);
  csv::write(path,
             {"abnormality", "category", "threshold", "rho_neg", "rho_pos", "before", "after", "retention_pct", "auc_full",
              "auc_reduced"},
             table);
  out << "calibrated " << rows.size() << " abnormalities\n";
  out << "wrote " << path.string() << "\n";
  return 0;
}

struct SweepArgs {
  std::string manifest, config, out, fractions = "0.1,0.25,0.5,1.0", seeds = "1,2,3";
  Overrides o;
};

inline int run_sweep(const SweepArgs& a, std::ostream& out) {
  const auto cfg = resolve_config(a.config, a.o);
  const auto fractions = parse_doubles(a.fractions);
  std::vector<std::uint64_t> seeds;
  for (const auto& s : csv::split(a.seeds)) {
    try {
      seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("sweep: bad seed '" + s + "'");
    }
  }
  const auto data = load_dataset(a.manifest, cfg);
  const auto n = cfg.model.input_size;
  const auto train_set = data.prepare(Partition::train, n, cfg.normalization);
  const auto val_set = data.prepare(Partition::val, n, cfg.normalization);
  const auto test_set = data.prepare(Partition::test, n, cfg.normalization);
  const auto points = data_size_sweep(train_set, val_set, test_set, data.tax, cfg.model, cfg.train, fractions, seeds);

  std::vector<std::vector<std::string>> table;
  std::map<std::pair<double, std::string>, std::pair<double, std::size_t>> mean;
  for (const auto& p : points) {
    for (const auto& r : p.test_auc) {
      table.push_back({csv::format(p.fraction), std::to_string(p.seed), std::to_string(p.train_images), r.abnormality, cell(r.auc)});
      if (!std::isnan(r.auc)) {
        auto& m = mean[{p.fraction, r.abnormality}];
        m.first += r.auc;
        ++m.second;
      }
    }
    out << "fraction " << csv::format(p.fraction) << " seed " << p.seed << " (" << p.train_images
        << " images): mean AUC " << cell(mean_auc(p.test_auc)) << "\n";
  }
  for (double f : fractions)
    for (const auto& name : data.tax.qualified_names()) {
      auto it = mean.find({f, name});
      table.push_back({csv::format(f), "mean", "", name, it == mean.end() ? "" : csv::format(it->second.first / double(it->second.second))});
    }
  const std::filesystem::path path = a.out.empty() ? out_dir() / "sweep.csv" : std::filesystem::path(a.out);
  csv::write(path, {"fraction", "seed", "train_images", "abnormality", "auc"}, table);
  out << "wrote " << path.string() << "\n";
  return 0;
}

inline void add_run_options(CLI::App* c, std::string& config, Overrides& o) {
  c->add_option("--config", config, "JSON run configuration")->check(CLI::ExistingFile);
  c->add_option("--seed", o.seed, "root seed (overrides the config)");
  c->add_option("--epochs", o.epochs, "maximum epochs");
  c->add_option("--max-steps", o.max_steps, "maximum optimizer steps");
  c->add_option("--size", o.size, "model input size N");
  c->add_option("--losses", o.losses, "enabled losses, e.g. abn,seg,loc");
}

}  // namespace cli_detail

// Exit status: 0 success, 1 runtime failure, 2 bad arguments.
inline int cli_dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Multi-task chest radiograph toolkit", "cxrmt"};
  app.require_subcommand(1);

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  synth->add_option("--n", sy.n, "image size")->check(CLI::Range(16, 4096));
  synth->add_option("--count", sy.count, "number of images")->check(CLI::PositiveNumber);
  synth->add_option("--seed", sy.seed, "seed");
  synth->add_option("--b-fraction", sy.b_fraction, "share of patients in dataset B")->check(CLI::Range(0.0, 1.0));
  synth->add_option("--seg-fraction", sy.seg_fraction, "share of images with masks")->check(CLI::Range(0.0, 1.0));
  synth->add_option("--out", sy.out, "output directory");

  NormalizeArgs no;
  auto* norm = app.add_subcommand("normalize", "apply dynamic windowing to a directory of images");
  norm->add_option("--in", no.in, "input directory")->required()->check(CLI::ExistingDirectory);
  norm->add_option("--out", no.out, "output directory");
  norm->add_option("--bins", no.params.bins, "histogram bins")->check(CLI::Range(16, 1 << 20));
  norm->add_option("--sigma", no.params.gaussian_sigma, "Gaussian sigma in bins");
  norm->add_option("--median", no.params.median_window, "median window in bins (odd)");
  norm->add_option("--tail", no.params.tail_mass, "clipped mass per side");
  norm->add_option("--bits", no.bits, "output bit depth")->check(CLI::IsMember({8, 16}));
  norm->add_option("--seed", no.seed, "unused; the command is deterministic");

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "train a model on the train partition of a manifest");
  trn->add_option("--manifest", tr.manifest, "manifest CSV")->required()->check(CLI::ExistingFile);
  trn->add_option("--out", tr.out, "checkpoint path");
  add_run_options(trn, tr.config, tr.o);

  EvalArgs ev;
  auto* evl = app.add_subcommand("eval", "score one partition and report per-class AUC with bootstrap CI");
  evl->add_option("--ckpt", ev.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  evl->add_option("--manifest", ev.manifest, "manifest CSV")->required()->check(CLI::ExistingFile);
  evl->add_option("--split", ev.split, "partition")->check(CLI::IsMember({"train", "val", "test", "all"}));
  evl->add_option("--out", ev.out, "metrics CSV");
  evl->add_option("--scores", ev.scores, "scores CSV");
  evl->add_option("--resamples", ev.resamples, "bootstrap resamples");
  evl->add_option("--alpha", ev.alpha, "interval level")->check(CLI::Range(0.0, 1.0));
  add_run_options(evl, ev.config, ev.o);

  AgreeArgs ag;
  auto* agr = app.add_subcommand("agree", "reader agreement report");
  agr->add_option("--annotations", ag.annotations, "annotation CSV")->required()->check(CLI::ExistingFile);
  agr->add_option("--original", ag.original, "original reader");
  agr->add_option("--out", ag.out, "report CSV");
  agr->add_option("--seed", ag.seed, "unused; the command is deterministic");

  BandArgs bd;
  auto* bnd = app.add_subcommand("band", "calibrate uncertainty bands on validation scores and apply them to test scores");
  bnd->add_option("--val-scores", bd.val_scores, "validation scores CSV")->required()->check(CLI::ExistingFile);
  bnd->add_option("--test-scores", bd.test_scores, "test scores CSV")->required()->check(CLI::ExistingFile);
  bnd->add_option("--annotations", bd.annotations, "annotation CSV for confidence categories")->check(CLI::ExistingFile);
  bnd->add_option("--original", bd.original, "original reader");
  bnd->add_option("--ltp", bd.ltp, "percent of true positives allowed inside the band")->check(CLI::Range(0.0, 100.0));
  bnd->add_option("--ltn", bd.ltn, "percent of true negatives allowed inside the band")->check(CLI::Range(0.0, 100.0));
  bnd->add_option("--out", bd.out, "report CSV");
  bnd->add_option("--seed", bd.seed, "unused; the command is deterministic");

  SweepArgs sw;
  auto* swp = app.add_subcommand("sweep", "test AUC against training-set size");
  swp->add_option("--manifest", sw.manifest, "manifest CSV")->required()->check(CLI::ExistingFile);
  swp->add_option("--fractions", sw.fractions, "comma-separated training fractions");
  swp->add_option("--seeds", sw.seeds, "comma-separated run seeds");
  swp->add_option("--out", sw.out, "sweep CSV");
  add_run_options(swp, sw.config, sw.o);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  try {
    if (*synth) return run_synth(sy, out);
    if (*norm) return run_normalize(no, out);
    if (*trn) return run_train(tr, out);
    if (*evl) return run_eval(ev, out);
    if (*agr) return run_agree(ag, out);
    if (*bnd) return run_band(bd, out);
    if (*swp) return run_sweep(sw, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return cli_dispatch(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace cxrmt

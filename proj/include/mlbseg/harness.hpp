#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mlbseg/data.hpp"
#include "mlbseg/meta.hpp"
#include "mlbseg/metrics.hpp"
#include "mlbseg/model.hpp"
#include "mlbseg/teacher.hpp"
#include "mlbseg/tensor.hpp"
#include "mlbseg/threading.hpp"

namespace mlbseg {

// ------------------------------------------------------------ configuration

// Flat `key = value` config file; later lines win, CLI --set overrides win
// over the file, unknown keys are errors with line numbers.
struct ExperimentConfig {
  std::string out_dir;
  std::string data_manifest;  // load splits from here instead of generating

  // synthetic data
  int h = 32, w = 32;
  int clean_count = 8, meta_count = 4, unlabeled_count = 64, eval_count = 32;
  GenConfig::Family shape_family = GenConfig::Family::kMixed;
  double noise_level = 0.05;

  // initialized-label corruption (applied on top of baseline predictions)
  int corrupt_dilate = 0, corrupt_erode = 0;
  double corrupt_flip = 0.0;

  // model + optimization
  int width = 8, classes = 2;
  double alpha = 0.005, beta = 1.0, eps = 1e-12;
  double momentum = 0.9, weight_decay = 5e-4;
  int b_c = 4, b_n = 4;
  double lambda_aug = 1.0, lambda_st = 1.0;
  double gamma = 0.1, mu = 0.0, sigma = 1.0;
  double ema_decay = 0.99;
  int epochs_baseline = 10, epochs_mlb = 30;  // desk-scale defaults
  uint64_t seed = 1;

  // component toggles
  bool mlb = true;
  bool mean_teacher = false;
  std::vector<AugSpec> ple;  // nonempty enables the ensemble + consistency
  bool fixed_bootstrap = false;

  int stop_after_epoch = -1;  // stop the training phase early, keep snapshot

  void validate() const {
    hyper().validate();
    if (h < 8 || w < 8 || h % 2 || w % 2) throw Error("config: h and w must be even and >= 8");
    if (clean_count < 1 || meta_count < 1 || unlabeled_count < 1 || eval_count < 1)
      throw Error("config: split counts must be >= 1");
    if (width < 1) throw Error("config: width must be >= 1");
    if (classes != 2) throw Error("config: classes must be 2 (binary metrics)");
    if (corrupt_dilate < 0 || corrupt_erode < 0) throw Error("config: corruption radii must be >= 0");
    if (corrupt_flip < 0 || corrupt_flip > 1) throw Error("config: corrupt_flip must be in [0,1]");
    if (noise_level < 0) throw Error("config: noise_level must be >= 0");
    if (!ple.empty() && !mlb) throw Error("config: ple requires mlb = true");
    if (mlb && fixed_bootstrap) throw Error("config: mlb and fixed_bootstrap are mutually exclusive");
  }

  HyperConfig hyper() const {
    HyperConfig hc;
    hc.alpha = alpha;
    hc.beta = beta;
    hc.eps = eps;
    hc.momentum = momentum;
    hc.weight_decay = weight_decay;
    hc.b_c = b_c;
    hc.b_n = b_n;
    hc.lambda_aug = lambda_aug;
    hc.lambda_st = lambda_st;
    hc.augs = ple;
    hc.gamma = gamma;
    hc.mu = mu;
    hc.sigma = sigma;
    hc.ema_decay = ema_decay;
    hc.epochs_baseline = epochs_baseline;
    hc.epochs_mlb = epochs_mlb;
    hc.seed = seed;
    return hc;
  }

  void set_key(const std::string& key, const std::string& value, const std::string& where);
  static ExperimentConfig from_text(const std::string& text, const std::vector<std::string>& overrides = {});
  static ExperimentConfig from_file(const std::string& path, const std::vector<std::string>& overrides = {});
};

namespace detail {
inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}
inline long long parse_int(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw Error(where + ": '" + v + "' is not an integer");
  }
}
inline double parse_double(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw Error(where + ": '" + v + "' is not a number");
  }
}
inline bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(where + ": '" + v + "' is not a boolean (true/false)");
}
}  // namespace detail

inline void ExperimentConfig::set_key(const std::string& key, const std::string& value,
                                      const std::string& where) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  auto as_int = [&](int lo) {
    long long x = parse_int(value, where);
    if (x < lo || x > 1'000'000'000) throw Error(where + ": value " + value + " out of range");
    return static_cast<int>(x);
  };
  if (key == "out_dir") out_dir = value;
  else if (key == "data_manifest") data_manifest = value;
  else if (key == "h") h = as_int(2);
  else if (key == "w") w = as_int(2);
  else if (key == "clean_count") clean_count = as_int(1);
  else if (key == "meta_count") meta_count = as_int(1);
  else if (key == "unlabeled_count") unlabeled_count = as_int(1);
  else if (key == "eval_count") eval_count = as_int(1);
  else if (key == "shape_family") {
    try {
      shape_family = GenConfig::parse_family(value);
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
  } else if (key == "noise_level") noise_level = parse_double(value, where);
  else if (key == "corrupt_dilate") corrupt_dilate = as_int(0);
  else if (key == "corrupt_erode") corrupt_erode = as_int(0);
  else if (key == "corrupt_flip") corrupt_flip = parse_double(value, where);
  else if (key == "width") width = as_int(1);
  else if (key == "classes") classes = as_int(2);
  else if (key == "alpha") alpha = parse_double(value, where);
  else if (key == "beta") beta = parse_double(value, where);
  else if (key == "eps") eps = parse_double(value, where);
  else if (key == "momentum") momentum = parse_double(value, where);
  else if (key == "weight_decay") weight_decay = parse_double(value, where);
  else if (key == "b_c") b_c = as_int(1);
  else if (key == "b_n") b_n = as_int(1);
  else if (key == "lambda_aug") lambda_aug = parse_double(value, where);
  else if (key == "lambda_st") lambda_st = parse_double(value, where);
  else if (key == "gamma") gamma = parse_double(value, where);
  else if (key == "mu") mu = parse_double(value, where);
  else if (key == "sigma") sigma = parse_double(value, where);
  else if (key == "ema_decay") ema_decay = parse_double(value, where);
  else if (key == "epochs_baseline") epochs_baseline = as_int(0);
  else if (key == "epochs_mlb") epochs_mlb = as_int(0);
  else if (key == "seed") seed = static_cast<uint64_t>(parse_int(value, where));
  else if (key == "mlb") mlb = parse_bool(value, where);
  else if (key == "mean_teacher") mean_teacher = parse_bool(value, where);
  else if (key == "fixed_bootstrap") fixed_bootstrap = parse_bool(value, where);
  else if (key == "stop_after_epoch") {
    long long x = parse_int(value, where);
    stop_after_epoch = static_cast<int>(x);
  } else if (key == "ple") {
    try {
      ple = parse_aug_list(value);
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
  } else {
    throw Error(where + ": unknown key '" + key + "'");
  }
}

inline ExperimentConfig ExperimentConfig::from_text(const std::string& text,
                                                    const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    std::string where = "config line " + std::to_string(ln);
    if (eq == std::string::npos) throw Error(where + ": expected key = value, got '" + s + "'");
    cfg.set_key(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)), where);
  }
  for (const std::string& ov : overrides) {
    size_t eq = ov.find('=');
    std::string where = "override '" + ov + "'";
    if (eq == std::string::npos) throw Error(where + ": expected key=value");
    cfg.set_key(detail::trim(ov.substr(0, eq)), detail::trim(ov.substr(eq + 1)), where);
  }
  return cfg;
}

inline ExperimentConfig ExperimentConfig::from_file(const std::string& path,
                                                    const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw Error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str(), overrides);
}

// ------------------------------------------------------------------- splits

struct Splits {
  Dataset clean, meta, unlabeled, eval;
};

// Distinct RNG streams so e.g. changing epochs never changes the data.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
constexpr uint64_t kStreamData = 0, kStreamBaseline = 1, kStreamTrain = 2, kStreamCorrupt = 3;

inline Splits make_splits(const ExperimentConfig& cfg) {
  Splits sp;
  if (!cfg.data_manifest.empty()) {
    std::string dir = std::filesystem::path(cfg.data_manifest).parent_path().string();
    auto resolve = [&](const std::string& p) {
      return std::filesystem::path(p).is_absolute() || dir.empty() ? p : dir + "/" + p;
    };
    bool got_clean = false, got_meta = false, got_unlabeled = false, got_eval = false;
    for (const auto& [split, path] : load_manifest(cfg.data_manifest)) {
      Dataset ds = load_mseg(resolve(path));
      ds.split = split;
      if (split == "clean") sp.clean = std::move(ds), got_clean = true;
      else if (split == "meta") sp.meta = std::move(ds), got_meta = true;
      else if (split == "unlabeled") sp.unlabeled = std::move(ds), got_unlabeled = true;
      else if (split == "eval") sp.eval = std::move(ds), got_eval = true;
      else if (split != "initialized")
        throw Error("manifest: unknown split '" + split + "'");
    }
    if (!got_clean || !got_meta || !got_unlabeled || !got_eval)
      throw Error("manifest: needs clean, meta, unlabeled and eval splits");
    for (const Dataset* d : {&sp.clean, &sp.meta, &sp.eval})
      for (const Sample& s : d->samples)
        if (!s.has_mask) throw Error("manifest: split '" + d->split + "' has unlabeled samples");
    return sp;
  }
  GenConfig g;
  g.h = cfg.h;
  g.w = cfg.w;
  g.family = cfg.shape_family;
  g.noise_level = cfg.noise_level;
  Rng rng(mix_seed(cfg.seed, kStreamData));
  auto gen = [&](int count, const char* split) {
    GenConfig gc = g;
    gc.count = count;
    Dataset ds = generate(gc, rng);
    ds.split = split;
    return ds;
  };
  sp.clean = gen(cfg.clean_count, "clean");
  sp.meta = gen(cfg.meta_count, "meta");
  sp.unlabeled = gen(cfg.unlabeled_count, "unlabeled");
  sp.eval = gen(cfg.eval_count, "eval");
  return sp;
}

// gen-data artifact: the four splits plus manifest.txt; the unlabeled split
// is stored without masks.
inline void write_splits(const ExperimentConfig& cfg) {
  if (cfg.out_dir.empty()) throw Error("gen-data: out_dir is not set");
  Splits sp = make_splits(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  Dataset stripped = sp.unlabeled;
  for (Sample& s : stripped.samples) {
    s.has_mask = false;
    s.mask = Mask();
  }
  save_mseg(sp.clean, cfg.out_dir + "/clean.mseg");
  save_mseg(sp.meta, cfg.out_dir + "/meta.mseg");
  save_mseg(stripped, cfg.out_dir + "/unlabeled.mseg");
  save_mseg(sp.eval, cfg.out_dir + "/eval.mseg");
  save_manifest(cfg.out_dir + "/manifest.txt", {{"clean", "clean.mseg"},
                                                {"meta", "meta.mseg"},
                                                {"unlabeled", "unlabeled.mseg"},
                                                {"eval", "eval.mseg"}});
}

// --------------------------------------------------------------- evaluation

struct EvalSummary {
  double dice = 0, jaccard = 0;
  double hd = 0, hd95 = 0, asd = 0;  // means over non-degenerate pairs
  int degenerate = 0;
};

inline EvalSummary evaluate(const SegModel& model, const Dataset& eval_set) {
  int n = static_cast<int>(eval_set.samples.size());
  if (n == 0) throw Error("evaluate: eval set is empty");
  std::vector<MetricsReport> reports(static_cast<size_t>(n));
  parallel_for(n, [&](int i) {
    const Sample& s = eval_set.samples[static_cast<size_t>(i)];
    if (!s.has_mask) throw Error("evaluate: eval sample " + std::to_string(i) + " has no mask");
    reports[static_cast<size_t>(i)] = compute_metrics(model.predict(s.image), s.mask);
  });
  EvalSummary out;
  int ok = 0;
  for (const MetricsReport& r : reports) {
    out.dice += r.dice;
    out.jaccard += r.jaccard;
    if (r.degenerate) {
      ++out.degenerate;
    } else {
      out.hd += r.hd;
      out.hd95 += r.hd95;
      out.asd += r.asd;
      ++ok;
    }
  }
  out.dice /= n;
  out.jaccard /= n;
  double inf = std::numeric_limits<double>::infinity();
  out.hd = ok ? out.hd / ok : inf;
  out.hd95 = ok ? out.hd95 / ok : inf;
  out.asd = ok ? out.asd / ok : inf;
  return out;
}

// -------------------------------------------------------------- CSV helpers

inline std::string fmt_g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string report_row(const std::string& phase, int epoch, double loss, const EvalSummary& e) {
  std::string s = phase + "," + std::to_string(epoch) + "," + fmt_g17(loss);
  for (double x : {e.dice, e.jaccard, e.hd, e.hd95, e.asd}) s += "," + fmt_g17(x);
  s += "," + std::to_string(e.degenerate);
  return s;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(content.data(), static_cast<long>(content.size()));
  if (!f) throw Error("short write to '" + path + "'");
}

constexpr const char* kReportHeader = "phase,epoch,loss,dice,jaccard,hd,hd95,asd,degenerate";

inline void write_report_csv(const std::string& path, const std::vector<std::string>& rows) {
  std::string out = std::string(kReportHeader) + "\r\n";
  for (const std::string& r : rows) out += r + "\r\n";
  write_text_file(path, out);
}

// ----------------------------------------------------------------- snapshot

namespace detail {
inline void bin_u32(std::string& b, uint32_t v) { put_u32(b, v); }
inline void bin_u64(std::string& b, uint64_t v) {
  put_u32(b, static_cast<uint32_t>(v & 0xffffffffu));
  put_u32(b, static_cast<uint32_t>(v >> 32));
}
inline void bin_double(std::string& b, double x) {
  uint64_t bits;
  std::memcpy(&bits, &x, 8);
  bin_u64(b, bits);
}
inline void bin_string(std::string& b, const std::string& s) {
  bin_u32(b, static_cast<uint32_t>(s.size()));
  b += s;
}
inline void bin_doubles(std::string& b, const ParamVector& v) {
  bin_u32(b, static_cast<uint32_t>(v.size()));
  for (double x : v) bin_double(b, x);
}

struct BinReader {
  const std::string& buf;
  size_t off = 0;
  void need(size_t n, const char* what) {
    if (off + n > buf.size()) throw Error(std::string("snapshot: truncated reading ") + what);
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = get_u32(buf, off);
    off += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    uint64_t lo = u32(what);
    uint64_t hi = u32(what);
    return lo | (hi << 32);
  }
  double f64(const char* what) {
    uint64_t bits = u64(what);
    double x;
    std::memcpy(&x, &bits, 8);
    return x;
  }
  std::string str(const char* what) {
    uint32_t n = u32(what);
    need(n, what);
    std::string s = buf.substr(off, n);
    off += n;
    return s;
  }
  ParamVector doubles(const char* what) {
    uint32_t n = u32(what);
    ParamVector v(n);
    for (uint32_t i = 0; i < n; ++i) v[i] = f64(what);
    return v;
  }
};
}  // namespace detail

struct TrainSnapshot {
  int epochs_done = 0;  // training-phase epochs completed
  ParamVector params;
  ParamVector velocity;
  bool has_teacher = false;
  ParamVector teacher;
  int best_epoch = -1;
  EvalSummary best;
  ParamVector best_params;
  std::string rng_state;
  std::vector<std::string> rows;  // all report.csv rows so far, incl. baseline

  void save(const std::string& path) const {
    std::string b = "MSNP";
    detail::bin_u32(b, 1);
    detail::bin_u32(b, static_cast<uint32_t>(epochs_done));
    detail::bin_doubles(b, params);
    detail::bin_doubles(b, velocity);
    b.push_back(has_teacher ? 1 : 0);
    if (has_teacher) detail::bin_doubles(b, teacher);
    detail::bin_u32(b, static_cast<uint32_t>(best_epoch + 1));
    for (double x : {best.dice, best.jaccard, best.hd, best.hd95, best.asd}) detail::bin_double(b, x);
    detail::bin_u32(b, static_cast<uint32_t>(best.degenerate));
    detail::bin_doubles(b, best_params);
    detail::bin_string(b, rng_state);
    detail::bin_u32(b, static_cast<uint32_t>(rows.size()));
    for (const std::string& r : rows) detail::bin_string(b, r);
    write_text_file(path, b);
  }

  static TrainSnapshot load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("snapshot: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || buf.compare(0, 4, "MSNP") != 0)
      throw Error("snapshot '" + path + "': bad magic");
    detail::BinReader r{buf, 4};
    uint32_t version = r.u32("version");
    if (version != 1) throw Error("snapshot '" + path + "': unsupported version " + std::to_string(version));
    TrainSnapshot s;
    s.epochs_done = static_cast<int>(r.u32("epochs"));
    s.params = r.doubles("params");
    s.velocity = r.doubles("velocity");
    r.need(1, "teacher flag");
    s.has_teacher = buf[r.off++] != 0;
    if (s.has_teacher) s.teacher = r.doubles("teacher");
    s.best_epoch = static_cast<int>(r.u32("best epoch")) - 1;
    s.best.dice = r.f64("best");
    s.best.jaccard = r.f64("best");
    s.best.hd = r.f64("best");
    s.best.hd95 = r.f64("best");
    s.best.asd = r.f64("best");
    s.best.degenerate = static_cast<int>(r.u32("best"));
    s.best_params = r.doubles("best params");
    s.rng_state = r.str("rng state");
    uint32_t n = r.u32("row count");
    for (uint32_t i = 0; i < n; ++i) s.rows.push_back(r.str("row"));
    if (r.off != buf.size()) throw Error("snapshot '" + path + "': trailing bytes");
    return s;
  }
};

// ----------------------------------------------------------- the experiment

struct RunResult {
  std::string phase;  // baseline | fixed | mlb
  int best_epoch = -1;
  EvalSummary best;
  bool completed = false;  // false when stop_after_epoch interrupted training
  ParamVector best_params;
};

// Called after every training step; used by the weight-map dump tool.
struct StepContext {
  int step = 0;  // global step index across epochs
  const std::vector<int>* batch_indices = nullptr;
  const std::vector<BootSample>* batch = nullptr;
  const StepResult* result = nullptr;
};
using StepHook = std::function<void(const StepContext&)>;

inline std::vector<WeightMapPair> make_fixed_weights(size_t batch, int h, int w) {
  double c = 1.0 / (static_cast<double>(batch) * h * w);
  std::vector<WeightMapPair> out(batch);
  for (auto& p : out) {
    p.w_n = Tensor::full({h, w}, c);
    p.w_p = Tensor::full({h, w}, c);
  }
  return out;
}

// Pipeline: baseline training on the clean split -> label initialization on
// the unlabeled split (plus optional synthetic corruption) -> the training
// phase (meta-learned or fixed weights) -> per-epoch evaluation. Everything
// is deterministic per seed; report.csv / final.csv / snapshot.bin land in
// out_dir (when set).
inline RunResult run_experiment(const ExperimentConfig& cfg, bool resume = false,
                                const StepHook& hook = {}) {
  cfg.validate();
  if (resume && cfg.out_dir.empty()) throw Error("resume: out_dir is not set");
  bool training_phase = cfg.mlb || cfg.fixed_bootstrap;
  std::string phase = cfg.mlb ? "mlb" : cfg.fixed_bootstrap ? "fixed" : "baseline";
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
  std::string snap_path = cfg.out_dir + "/snapshot.bin";
  if (resume && !std::filesystem::exists(snap_path))
    throw Error("resume: no snapshot at '" + snap_path + "'");

  Splits sp = make_splits(cfg);
  HyperConfig hc = cfg.hyper();

  std::vector<LabeledImage> clean, meta;
  for (const Sample& s : sp.clean.samples) clean.push_back({s.image, s.mask});
  for (const Sample& s : sp.meta.samples) meta.push_back({s.image, s.mask});

  std::vector<std::string> rows;
  auto flush_report = [&]() {
    if (!cfg.out_dir.empty()) write_report_csv(cfg.out_dir + "/report.csv", rows);
  };

  // Baseline phase: deterministic replay also on resume.
  Rng rng_base(mix_seed(cfg.seed, kStreamBaseline));
  SegModel model = SegModel::init({cfg.width, cfg.classes}, rng_base);
  int best_base_epoch = -1;
  EvalSummary best_base;
  ParamVector best_base_params = model.flatten();
  baseline_train(model, clean, hc, rng_base, [&](int epoch, double loss) {
    EvalSummary e = evaluate(model, sp.eval);
    rows.push_back(report_row("baseline", epoch, loss, e));
    if (!training_phase && (best_base_epoch < 0 || e.dice > best_base.dice)) {
      best_base_epoch = epoch;
      best_base = e;
      best_base_params = model.flatten();
    }
  });

  auto finish = [&](RunResult res) {
    flush_report();
    if (res.completed && !cfg.out_dir.empty()) {
      std::string out = "phase,best_epoch,dice,jaccard,hd,hd95,asd,degenerate\r\n";
      out += res.phase + "," + std::to_string(res.best_epoch);
      for (double x : {res.best.dice, res.best.jaccard, res.best.hd, res.best.hd95, res.best.asd})
        out += "," + fmt_g17(x);
      out += "," + std::to_string(res.best.degenerate) + "\r\n";
      write_text_file(cfg.out_dir + "/final.csv", out);
    }
    return res;
  };

  if (!training_phase) {
    RunResult res;
    res.phase = "baseline";
    if (cfg.epochs_baseline == 0) {
      best_base_epoch = -1;
      best_base = evaluate(model, sp.eval);
      best_base_params = model.flatten();
    }
    res.best_epoch = best_base_epoch;
    res.best = best_base;
    res.best_params = best_base_params;
    res.completed = true;
    return finish(res);
  }

  // Label initialization from the pretrained model, plus optional boundary corruption.
  std::vector<Tensor> unlabeled_images;
  for (const Sample& s : sp.unlabeled.samples) unlabeled_images.push_back(s.image);
  std::vector<Mask> labels = init_labels(model, unlabeled_images);
  if (cfg.corrupt_dilate > 0 || cfg.corrupt_erode > 0 || cfg.corrupt_flip > 0) {
    Rng rng_cor(mix_seed(cfg.seed, kStreamCorrupt));
    CorruptConfig cc{cfg.corrupt_dilate, cfg.corrupt_erode, cfg.corrupt_flip};
    for (Mask& m : labels) m = corrupt_mask(m, cc, rng_cor);
  }
  std::vector<BootSample> boot;
  for (size_t k = 0; k < unlabeled_images.size(); ++k) boot.push_back({unlabeled_images[k], labels[k]});
  if (!cfg.out_dir.empty()) {
    Dataset init_ds;
    init_ds.split = "initialized";
    init_ds.h = cfg.h;
    init_ds.w = cfg.w;
    for (const BootSample& b : boot) init_ds.samples.push_back({b.image, true, b.label_init});
    save_mseg(init_ds, cfg.out_dir + "/initialized.mseg");
  }

  // Training phase.
  Rng rng_train(mix_seed(cfg.seed, kStreamTrain));
  SgdOpt opt{hc.alpha, hc.momentum, hc.weight_decay, {}};
  opt.reset(model.param_count());
  TeacherState<SegModel> teacher_state{model, hc.ema_decay};
  TeacherState<SegModel>* teacher = cfg.mean_teacher ? &teacher_state : nullptr;

  int start_epoch = 0;
  int best_epoch = -1;
  EvalSummary best;
  ParamVector best_params = model.flatten();
  if (resume) {
    TrainSnapshot snap = TrainSnapshot::load(snap_path);
    if (static_cast<int>(snap.params.size()) != model.param_count())
      throw Error("resume: snapshot param count " + std::to_string(snap.params.size()) +
                  " does not match the configured model (" + std::to_string(model.param_count()) + ")");
    model.unflatten(snap.params);
    opt.velocity = snap.velocity;
    if (snap.has_teacher != cfg.mean_teacher) throw Error("resume: teacher toggle differs from snapshot");
    if (snap.has_teacher) teacher_state.model.unflatten(snap.teacher);
    rng_train.load_state(snap.rng_state);
    start_epoch = snap.epochs_done;
    best_epoch = snap.best_epoch;
    best = snap.best;
    best_params = snap.best_params;
    rows = snap.rows;
  }

  std::vector<int> order(boot.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> meta_order(meta.size());
  std::iota(meta_order.begin(), meta_order.end(), 0);
  int steps_per_epoch = static_cast<int>((boot.size() + static_cast<size_t>(hc.b_n) - 1) / hc.b_n);

  for (int epoch = start_epoch; epoch < cfg.epochs_mlb; ++epoch) {
    if (cfg.stop_after_epoch >= 0 && epoch >= cfg.stop_after_epoch) {
      RunResult res;
      res.phase = phase;
      res.best_epoch = best_epoch;
      res.best = best;
      res.best_params = best_params;
      res.completed = false;
      flush_report();
      return res;
    }
    // Re-seed both orders from identity every time: shuffling in place would
    // make the batch layout depend on history the snapshot does not carry,
    // and resumed runs would diverge from uninterrupted ones.
    std::iota(order.begin(), order.end(), 0);
    rng_train.shuffle(order);
    double epoch_loss = 0;
    int epoch_steps = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(hc.b_n)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(hc.b_n));
      std::vector<int> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
      std::vector<BootSample> batch;
      for (int i : idx) batch.push_back(boot[static_cast<size_t>(i)]);
      std::iota(meta_order.begin(), meta_order.end(), 0);
      rng_train.shuffle(meta_order);
      std::vector<LabeledImage> s_c;
      for (size_t i = 0; i < std::min(meta.size(), static_cast<size_t>(hc.b_c)); ++i)
        s_c.push_back(meta[static_cast<size_t>(meta_order[i])]);

      StepResult sr;
      if (cfg.fixed_bootstrap) {
        std::vector<WeightMapPair> fixed = make_fixed_weights(batch.size(), cfg.h, cfg.w);
        sr = mlb_step(model, opt, teacher, batch, s_c, hc, rng_train, &fixed);
      } else {
        sr = mlb_step(model, opt, teacher, batch, s_c, hc, rng_train);
      }
      epoch_loss += sr.loss_total;
      ++epoch_steps;
      if (hook) {
        StepContext ctx;
        ctx.step = epoch * steps_per_epoch + epoch_steps - 1;
        ctx.batch_indices = &idx;
        ctx.batch = &batch;
        ctx.result = &sr;
        hook(ctx);
      }
    }
    EvalSummary e = evaluate(model, sp.eval);
    rows.push_back(report_row(phase, epoch, epoch_loss / std::max(1, epoch_steps), e));
    if (best_epoch < 0 || e.dice > best.dice) {
      best_epoch = epoch;
      best = e;
      best_params = model.flatten();
    }
    flush_report();
    if (!cfg.out_dir.empty()) {
      TrainSnapshot snap;
      snap.epochs_done = epoch + 1;
      snap.params = model.flatten();
      snap.velocity = opt.velocity;
      snap.has_teacher = cfg.mean_teacher;
      if (cfg.mean_teacher) snap.teacher = teacher_state.model.flatten();
      snap.best_epoch = best_epoch;
      snap.best = best;
      snap.best_params = best_params;
      snap.rng_state = rng_train.save_state();
      snap.rows = rows;
      snap.save(snap_path);
    }
  }

  RunResult res;
  res.phase = phase;
  if (best_epoch < 0) {  // epochs_mlb == 0: evaluate the pretrained model
    best = evaluate(model, sp.eval);
    best_params = model.flatten();
  }
  res.best_epoch = best_epoch;
  res.best = best;
  res.best_params = best_params;
  res.completed = true;
  return finish(res);
}

// ----------------------------------------------------------------- ablation

struct AblationRow {
  std::string name;
  std::vector<EvalSummary> finals;  // one per seed
};

inline ExperimentConfig ablation_variant(const ExperimentConfig& base, const std::string& name) {
  ExperimentConfig c = base;
  c.mlb = false;
  c.fixed_bootstrap = false;
  c.mean_teacher = false;
  c.ple.clear();
  std::vector<AugSpec> ple = base.ple;
  if (ple.empty()) ple = parse_aug_list("zoom-in:2,zoom-out:2,zoom-out:4,flip-h");
  if (name == "fixed") {
    c.fixed_bootstrap = true;
  } else if (name == "mlb") {
    c.mlb = true;
  } else if (name == "mlb_teacher") {
    c.mlb = true;
    c.mean_teacher = true;
  } else if (name == "mlb_ple") {
    c.mlb = true;
    c.ple = ple;
  } else if (name == "mlb_ple_teacher") {
    c.mlb = true;
    c.ple = ple;
    c.mean_teacher = true;
  } else {
    throw Error("ablation: unknown variant '" + name + "'");
  }
  return c;
}

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v = {"fixed", "mlb", "mlb_teacher", "mlb_ple", "mlb_ple_teacher"};
  return v;
}

// Runs the five component-toggle configurations for every seed and writes
// ablation.csv with per-metric mean and (sample) standard deviation.
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const std::vector<uint64_t>& seeds) {
  base.validate();
  if (seeds.empty()) throw Error("ablation: needs at least one seed");
  if (base.out_dir.empty()) throw Error("ablation: out_dir is not set");
  std::vector<AblationRow> rows;
  for (const std::string& name : ablation_variants()) {
    AblationRow row;
    row.name = name;
    for (uint64_t s : seeds) {
      ExperimentConfig c = ablation_variant(base, name);
      c.seed = s;
      c.out_dir = base.out_dir + "/" + name + "/seed" + std::to_string(s);
      RunResult r = run_experiment(c);
      row.finals.push_back(r.best);
    }
    rows.push_back(std::move(row));
  }

  auto stat = [](const std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    return std::pair<double, double>(mean, sd);
  };
  std::string out =
      "config,dice_mean,dice_std,jaccard_mean,jaccard_std,hd_mean,hd_std,hd95_mean,hd95_std,asd_mean,"
      "asd_std,seeds\r\n";
  for (const AblationRow& row : rows) {
    out += row.name;
    for (auto get : {+[](const EvalSummary& e) { return e.dice; }, +[](const EvalSummary& e) { return e.jaccard; },
                     +[](const EvalSummary& e) { return e.hd; }, +[](const EvalSummary& e) { return e.hd95; },
                     +[](const EvalSummary& e) { return e.asd; }}) {
      std::vector<double> v;
      for (const EvalSummary& e : row.finals) v.push_back(get(e));
      auto [m, sd] = stat(v);
      out += "," + fmt_g17(m) + "," + fmt_g17(sd);
    }
    out += "," + std::to_string(row.finals.size()) + "\r\n";
  }
  write_text_file(base.out_dir + "/ablation.csv", out);
  return rows;
}

// ------------------------------------------------------------ weight dumps

// Re-runs the training phase and, at each listed global step, writes the
// normalized weight maps as MSEG float grids plus PGM renderings, along with
// the batch's initialized and pseudo labels and a steps.csv sidecar.
inline void dump_weight_maps(const ExperimentConfig& cfg, const std::vector<int>& steps) {
  cfg.validate();
  if (!cfg.mlb) throw Error("dump-weights: requires mlb = true");
  if (cfg.out_dir.empty()) throw Error("dump-weights: out_dir is not set");
  if (steps.empty()) throw Error("dump-weights: no steps listed");
  int steps_per_epoch = (cfg.unlabeled_count + cfg.b_n - 1) / cfg.b_n;
  int total = cfg.epochs_mlb * steps_per_epoch;
  for (int s : steps)
    if (s < 0 || s >= total)
      throw Error("dump-weights: step " + std::to_string(s) + " out of range [0," + std::to_string(total) +
                  ")");
  std::filesystem::create_directories(cfg.out_dir);

  std::string csv = "step,sample,dataset_index,wn_sum,wp_sum\r\n";
  auto hook = [&](const StepContext& ctx) {
    if (std::find(steps.begin(), steps.end(), ctx.step) == steps.end()) return;
    const auto& weights = ctx.result->weights;
    std::string tag = "step" + std::to_string(ctx.step);
    Dataset wn_ds, wp_ds, init_ds, pseudo_ds;
    for (Dataset* d : {&wn_ds, &wp_ds, &init_ds, &pseudo_ds}) {
      d->h = cfg.h;
      d->w = cfg.w;
    }
    wn_ds.split = "wn";
    wp_ds.split = "wp";
    init_ds.split = "initialized";
    pseudo_ds.split = "pseudo";
    for (size_t j = 0; j < weights.size(); ++j) {
      Tensor wn({1, cfg.h, cfg.w}, weights[j].w_n.v);
      Tensor wp({1, cfg.h, cfg.w}, weights[j].w_p.v);
      wn_ds.samples.push_back({wn, false, {}});
      wp_ds.samples.push_back({wp, false, {}});
      init_ds.samples.push_back({(*ctx.batch)[j].image, true, (*ctx.batch)[j].label_init});
      pseudo_ds.samples.push_back({(*ctx.batch)[j].image, true, ctx.result->pseudo[j]});
      double peak_n = *std::max_element(weights[j].w_n.v.begin(), weights[j].w_n.v.end());
      double peak_p = *std::max_element(weights[j].w_p.v.begin(), weights[j].w_p.v.end());
      std::string sj = std::to_string(j);
      save_pgm(cfg.out_dir + "/" + tag + "_s" + sj + "_wn.pgm", weights[j].w_n, 0.0, std::max(peak_n, 1e-300));
      save_pgm(cfg.out_dir + "/" + tag + "_s" + sj + "_wp.pgm", weights[j].w_p, 0.0, std::max(peak_p, 1e-300));
      double sum_n = 0, sum_p = 0;
      for (double x : weights[j].w_n.v) sum_n += x;
      for (double x : weights[j].w_p.v) sum_p += x;
      csv += std::to_string(ctx.step) + "," + sj + "," +
             std::to_string((*ctx.batch_indices)[j]) + "," + fmt_g17(sum_n) + "," + fmt_g17(sum_p) + "\r\n";
    }
    save_mseg(wn_ds, cfg.out_dir + "/" + tag + "_wn.mseg");
    save_mseg(wp_ds, cfg.out_dir + "/" + tag + "_wp.mseg");
    save_mseg(init_ds, cfg.out_dir + "/" + tag + "_init.mseg");
    save_mseg(pseudo_ds, cfg.out_dir + "/" + tag + "_pseudo.mseg");
  };
  run_experiment(cfg, false, hook);
  write_text_file(cfg.out_dir + "/steps.csv", csv);
}

}  // namespace mlbseg

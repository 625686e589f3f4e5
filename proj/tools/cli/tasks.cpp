#include "tasks.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include "cem/akima.hpp"
#include "cem/error.hpp"
#include "cem/train.hpp"
#include "cem/verify.hpp"

namespace cem::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Log {
 public:
  explicit Log(std::ostream& os) : os_(os) {}
  void line(const std::string& s) {
    std::lock_guard lock(mu_);
    os_ << s << '\n' << std::flush;
  }

 private:
  std::ostream& os_;
  std::mutex mu_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// Appends tagged metric records to a line-JSON file.
class MetricsFile {
 public:
  explicit MetricsFile(const fs::path& path) : out_(path) {
    if (!out_) throw DataError("cannot write '" + path.string() + "'");
  }
  std::function<void(const train::MetricRecord&)> sink(json tags) {
    return [this, tags = std::move(tags)](const train::MetricRecord& r) {
      json j = r;
      j.update(tags);
      out_ << j.dump() << '\n';
    };
  }

 private:
  std::ofstream out_;
};

// Runs fn(seed) for each seed on up to `jobs` threads. Every seed writes to
// its own directory, so workers share nothing but the log.
template <class F>
void for_each_seed(const std::vector<std::uint64_t>& seeds, std::size_t jobs, F&& fn) {
  const std::size_t workers = std::clamp<std::size_t>(jobs, 1, seeds.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(seeds.size());
  auto work = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        fn(i, seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

fs::path seed_dir(const fs::path& root, std::uint64_t seed) {
  fs::path d = root / ("seed-" + std::to_string(seed));
  fs::create_directories(d);
  return d;
}

// Weight init draws from its own stream so data and model seeds differ.
std::uint64_t model_seed(std::uint64_t seed) { return seed + 1000; }

train::TrainOptions train_options(const ExperimentSpec& s, const fs::path& dir) {
  train::TrainOptions o;
  o.log_every = s.logging.log_every;
  o.eval_every = s.logging.eval_every;
  o.eval_limit = s.logging.eval_limit;
  o.failure_dir = dir;
  return o;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------- gp

struct GpVariant {
  std::string name;
  std::size_t steps;
  model::ModelConfig cfg;
};

std::vector<GpVariant> gp_variants(const ExperimentSpec& s) {
  std::vector<GpVariant> out;
  if (s.gp.gated_baseline) {
    auto cfg = s.model;
    cfg.block.mlp = model::MlpKind::reference_gated;
    cfg.block.mlp_steps = 1;
    cfg.block.mlp_precond = layers::PreconditionerMode::identity;
    out.push_back({"gated", 0, cfg});
  }
  for (std::size_t t : s.gp.steps) {
    auto cfg = s.model;
    cfg.block.mlp = model::MlpKind::cem;
    cfg.block.mlp_steps = t;
    out.push_back({"cem-t" + std::to_string(t), t, cfg});
  }
  return out;
}

const char* kGpHeader =
    "seed,kernel,variant,T,parameters,mlp_core,flops,train_rmse,test_rmse,wall_seconds\n";

std::string gp_csv_row(const GpRow& r) {
  std::ostringstream os;
  os << r.seed << ',' << r.kernel << ',' << r.variant << ',' << r.steps << ',' << r.parameters
     << ',' << r.mlp_core << ',' << r.flops << ',' << fmt(r.train_rmse, 10) << ','
     << fmt(r.test_rmse, 10) << ',' << fmt(r.wall_seconds, 4) << '\n';
  return os.str();
}

std::vector<GpRow> gp_seed(const ExperimentSpec& s, std::uint64_t seed, const fs::path& dir,
                           Log& log) {
  const auto ds = data::gp_sample(s.data.kernel, s.data.n_points, seed, s.data.input_dim,
                                  s.data.train_fraction);
  data::write_csv(dir / "data.csv", {ds.train, ds.test});
  MetricsFile metrics(dir / "metrics.jsonl");
  std::vector<GpRow> rows;
  for (const auto& v : gp_variants(s)) {
    auto m = model::build_model(v.cfg, model_seed(seed));
    auto opts = train_options(s, dir);
    const std::string kernel = data::to_string(s.data.kernel.kind);
    opts.sink = metrics.sink({{"seed", seed}, {"variant", v.name}, {"T", v.steps},
                              {"kernel", kernel}});
    const auto run = train::train_loop(m, ds, s.optim, seed, opts);
    model::save_checkpoint(m, dir / (v.name + ".ckpt"));
    const auto counts = model::count_parameters(v.cfg);
    GpRow row{seed,
              kernel,
              v.name,
              v.steps,
              counts.total,
              counts.mlp_core,
              model::count_flops(v.cfg, 1, 1).total,
              run.last("train", "rmse"),
              run.last("test", "rmse"),
              run.wall_seconds};
    log.line("seed " + std::to_string(seed) + " " + v.name + ": train rmse " +
             fmt(row.train_rmse) + ", test rmse " + fmt(row.test_rmse) + " (" +
             fmt(row.wall_seconds, 3) + " s)");
    rows.push_back(row);
  }
  std::string csv = kGpHeader;
  for (const auto& r : rows) csv += gp_csv_row(r);
  write_text(dir / "summary.csv", csv);
  return rows;
}

RunResult run_gp(const ExperimentSpec& s, const fs::path& root, const RunOptions& o, Log& log) {
  std::vector<std::vector<GpRow>> per_seed(s.seeds.size());
  for_each_seed(s.seeds, o.jobs, [&](std::size_t i, std::uint64_t seed) {
    per_seed[i] = gp_seed(s, seed, seed_dir(root, seed), log);
  });
  std::vector<GpRow> rows;
  for (auto& v : per_seed) rows.insert(rows.end(), v.begin(), v.end());

  std::string csv = kGpHeader;
  for (const auto& r : rows) csv += gp_csv_row(r);
  write_text(root / "summary.csv", csv);

  std::ostream& out = *o.out;
  out << "kernel " << data::to_string(s.data.kernel.kind) << ", " << s.seeds.size()
      << " seed(s), " << s.data.n_points << " points\n";
  out << std::left << std::setw(10) << "model" << std::right << std::setw(11) << "params"
      << std::setw(11) << "mlp core" << std::setw(11) << "flops" << std::setw(24)
      << "train rmse" << std::setw(24) << "test rmse" << '\n';
  for (const auto& v : gp_variants(s)) {
    std::vector<double> tr, te;
    const GpRow* any = nullptr;
    for (const auto& r : rows) {
      if (r.variant != v.name) continue;
      tr.push_back(r.train_rmse);
      te.push_back(r.test_rmse);
      any = &r;
    }
    if (any == nullptr) continue;
    out << std::left << std::setw(10) << v.name << std::right << std::setw(11)
        << any->parameters << std::setw(11) << any->mlp_core << std::setw(11) << any->flops
        << std::setw(24) << (fmt(mean(tr), 4) + " +- " + fmt(stddev(tr), 2)) << std::setw(24)
        << (fmt(mean(te), 4) + " +- " + fmt(stddev(te), 2)) << '\n';
  }
  RunResult res;
  res.verdict = gp_ordering(rows);
  res.passed = res.verdict.value("passed", true);
  for (const auto& p : res.verdict["pairs"]) {
    out << "T" << p["shallow"].get<std::size_t>() << " -> T" << p["deep"].get<std::size_t>()
        << ": deeper wins on " << p["wins"].get<std::size_t>() << "/"
        << p["seeds"].get<std::size_t>() << " seeds\n";
  }
  if (res.verdict.contains("gated_vs_t1")) {
    const auto& g = res.verdict["gated_vs_t1"];
    out << "cem-t1 vs gated: mean test rmse gap " << fmt(100.0 * g["mean_relative_gap"].get<double>(), 3)
        << "%, worst seed " << fmt(100.0 * g["worst_relative_gap"].get<double>(), 3) << "%\n";
  }
  return res;
}

// ---------------------------------------------------------------- lm

train::LmData lm_data(const ExperimentSpec& s) {
  auto windows = data::ingest_text(s.data.corpus, s.data.seq_len);
  if (windows.size() < 2) {
    throw DataError("corpus '" + s.data.corpus + "' yields fewer than 2 windows of " +
                    std::to_string(s.data.seq_len) + " bytes");
  }
  // The tail of the text is held out.
  const auto n_eval = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(s.data.eval_fraction * static_cast<double>(windows.size()))),
      1, windows.size() - 1);
  train::LmData d;
  d.eval.assign(windows.end() - static_cast<std::ptrdiff_t>(n_eval), windows.end());
  windows.resize(windows.size() - n_eval);
  d.train = std::move(windows);
  return d;
}

struct LmRow {
  std::uint64_t seed = 0;
  std::size_t parameters = 0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  double reduction = 0.0;
  double eval_loss = 0.0;
  double eval_perplexity = 0.0;
  double wall_seconds = 0.0;
};

const char* kLmHeader =
    "seed,parameters,initial_train_loss,final_train_loss,reduction,eval_loss,eval_perplexity,"
    "wall_seconds\n";

std::string lm_csv_row(const LmRow& r) {
  std::ostringstream os;
  os << r.seed << ',' << r.parameters << ',' << fmt(r.initial_train_loss, 8) << ','
     << fmt(r.final_train_loss, 8) << ',' << fmt(r.reduction, 6) << ',' << fmt(r.eval_loss, 8)
     << ',' << fmt(r.eval_perplexity, 8) << ',' << fmt(r.wall_seconds, 4) << '\n';
  return os.str();
}

RunResult run_lm(const ExperimentSpec& s, const fs::path& root, const RunOptions& o, Log& log) {
  const auto d = lm_data(s);
  log.line("corpus: " + std::to_string(d.train.size()) + " train / " +
           std::to_string(d.eval.size()) + " eval windows of " + std::to_string(s.data.seq_len));
  std::vector<LmRow> rows(s.seeds.size());
  for_each_seed(s.seeds, o.jobs, [&](std::size_t i, std::uint64_t seed) {
    const auto dir = seed_dir(root, seed);
    MetricsFile metrics(dir / "metrics.jsonl");
    auto m = model::build_model(s.model, model_seed(seed));
    auto opts = train_options(s, dir);
    opts.sink = metrics.sink({{"seed", seed}});
    const auto run = train::train_loop(m, train::TrainData{d}, s.optim, seed, opts);
    model::save_checkpoint(m, dir / "model.ckpt");
    const auto losses = run.series("train", "loss");
    LmRow r;
    r.seed = seed;
    r.parameters = model::count_parameters(s.model).total;
    r.initial_train_loss = losses.front();
    r.final_train_loss = losses.back();
    r.reduction = 1.0 - r.final_train_loss / r.initial_train_loss;
    r.eval_loss = run.last("eval", "loss");
    r.eval_perplexity = run.last("eval", "perplexity");
    r.wall_seconds = run.wall_seconds;
    write_text(dir / "summary.csv", std::string(kLmHeader) + lm_csv_row(r));
    log.line("seed " + std::to_string(seed) + ": train loss " + fmt(r.initial_train_loss) +
             " -> " + fmt(r.final_train_loss) + " (" + fmt(100.0 * r.reduction, 3) +
             "% lower), eval perplexity " + fmt(r.eval_perplexity) + " (" +
             fmt(r.wall_seconds, 3) + " s)");
    rows[i] = r;
  });
  std::string csv = kLmHeader;
  for (const auto& r : rows) csv += lm_csv_row(r);
  write_text(root / "summary.csv", csv);

  RunResult res;
  res.verdict = {{"min_reduction_required", 0.2}, {"seeds", json::array()}};
  for (const auto& r : rows) {
    const bool ok = std::isfinite(r.final_train_loss) && r.reduction >= 0.2;
    res.passed = res.passed && ok;
    res.verdict["seeds"].push_back({{"seed", r.seed},
                                    {"initial_train_loss", r.initial_train_loss},
                                    {"final_train_loss", r.final_train_loss},
                                    {"reduction", r.reduction},
                                    {"eval_perplexity", r.eval_perplexity},
                                    {"passed", ok}});
    *o.out << "seed " << r.seed << ": loss " << fmt(r.initial_train_loss, 5) << " -> "
           << fmt(r.final_train_loss, 5) << ", reduction " << fmt(100.0 * r.reduction, 3)
           << "%, eval ppl " << fmt(r.eval_perplexity, 5) << (ok ? "" : "  [below 20%]")
           << '\n';
  }
  res.verdict["passed"] = res.passed;
  return res;
}

// ---------------------------------------------------------------- lr sweep

RunResult run_sweep(const ExperimentSpec& s, const fs::path& root, const RunOptions& o,
                    Log& log) {
  const bool lm = s.sweep.base == Task::lm_smoke;
  const std::string split = lm ? "eval" : "test";
  const std::string metric = lm ? "perplexity" : "rmse";
  std::optional<train::LmData> lm_corpus;
  if (lm) lm_corpus = lm_data(s);

  std::vector<json> per_seed(s.seeds.size());
  for_each_seed(s.seeds, o.jobs, [&](std::size_t i, std::uint64_t seed) {
    const auto dir = seed_dir(root, seed);
    MetricsFile metrics(dir / "metrics.jsonl");
    const train::TrainData d =
        lm ? train::TrainData{*lm_corpus}
           : train::TrainData{data::gp_sample(s.data.kernel, s.data.n_points, seed,
                                              s.data.input_dim, s.data.train_fraction)};
    std::vector<double> xs, ys;
    std::string csv = "lr," + split + "_" + metric + "\n";
    for (double lr : s.sweep.lrs) {
      auto optim = s.optim;
      optim.peak_lr = lr;
      auto m = model::build_model(s.model, model_seed(seed));
      auto opts = train_options(s, dir);
      opts.sink = metrics.sink({{"seed", seed}, {"lr", lr}});
      double value = std::numeric_limits<double>::quiet_NaN();
      try {
        value = train::train_loop(m, d, optim, seed, opts).last(split, metric);
      } catch (const NumericalError& e) {
        log.line("seed " + std::to_string(seed) + " lr " + fmt(lr) + " diverged: " + e.what());
      }
      log.line("seed " + std::to_string(seed) + " lr " + fmt(lr) + ": " + split + " " + metric +
               " " + fmt(value));
      csv += fmt(lr, 8) + "," + fmt(value, 10) + "\n";
      if (std::isfinite(value)) {
        xs.push_back(std::log10(lr));
        ys.push_back(value);
      }
    }
    json v = {{"seed", seed}, {"metric", split + "/" + metric}, {"points", xs.size()}};
    if (xs.size() >= 5) {
      const auto best = train::AkimaSpline(xs, ys).argmin();
      v["argmin_lr"] = std::pow(10.0, best.x);
      v["argmin_value"] = best.y;
      csv += "argmin:" + fmt(std::pow(10.0, best.x), 8) + "," + fmt(best.y, 10) + "\n";
    } else {
      v["argmin_lr"] = nullptr;
    }
    write_text(dir / "sweep.csv", csv);
    per_seed[i] = v;
  });
  RunResult res;
  res.verdict = {{"seeds", per_seed}};
  for (const auto& v : per_seed) {
    *o.out << "seed " << v["seed"].get<std::uint64_t>() << ": ";
    if (v["argmin_lr"].is_null()) {
      *o.out << "fewer than 5 finite points, no Akima fit\n";
      res.passed = false;
    } else {
      *o.out << "Akima argmin lr " << fmt(v["argmin_lr"].get<double>(), 4) << " ("
             << v["metric"].get<std::string>() << " " << fmt(v["argmin_value"].get<double>(), 5)
             << ")\n";
    }
  }
  res.verdict["passed"] = res.passed;
  return res;
}

// ---------------------------------------------------------------- count

bool uses_cem(const model::ModelConfig& c) {
  return c.block.attention == model::AttentionKind::cem || c.block.mlp == model::MlpKind::cem;
}

// Same shapes with every CEM layer swapped for its reference counterpart.
model::ModelConfig reference_twin(model::ModelConfig c) {
  if (c.block.attention == model::AttentionKind::cem) {
    c.block.attention = model::AttentionKind::reference;
  }
  if (c.block.mlp == model::MlpKind::cem) c.block.mlp = model::MlpKind::reference_gated;
  c.block.attn_steps = c.block.mlp_steps = 1;
  c.block.diagonal = layers::DiagonalMode::none;
  c.block.attn_precond = c.block.mlp_precond = layers::PreconditionerMode::identity;
  return c;
}

std::string fraction(std::size_t num, std::size_t den) {
  if (den == 0) return "-";
  const std::size_t g = std::gcd(num, den);
  return std::to_string(num / g) + "/" + std::to_string(den / g);
}

RunResult run_count(const ExperimentSpec& s, const fs::path& root, const RunOptions& o) {
  std::ostream& out = *o.out;
  std::string csv = "name,attention_core,mlp_core,total,flops\n";
  RunResult res;
  res.verdict = {{"models", json::array()}};
  out << std::left << std::setw(22) << "model" << std::right << std::setw(14) << "attn core"
      << std::setw(14) << "mlp core" << std::setw(14) << "total" << std::setw(18)
      << ("flops@" + std::to_string(s.count.seq_len)) << '\n';
  auto row = [&](const std::string& name, const model::ModelConfig& cfg) {
    const auto c = model::count_parameters(cfg);
    const auto f = model::count_flops(cfg, s.count.seq_len, 1);
    out << std::left << std::setw(22) << name << std::right << std::setw(14) << c.attention_core
        << std::setw(14) << c.mlp_core << std::setw(14) << c.total << std::setw(18) << f.total
        << '\n';
    csv += name + "," + std::to_string(c.attention_core) + "," + std::to_string(c.mlp_core) +
           "," + std::to_string(c.total) + "," + std::to_string(f.total) + "\n";
    return c;
  };
  for (const auto& e : s.count.models) {
    const auto mine = row(e.name, e.model);
    json entry = {{"name", e.name},
                  {"attention_core", mine.attention_core},
                  {"mlp_core", mine.mlp_core},
                  {"total", mine.total},
                  {"by_group", mine.by_group}};
    if (uses_cem(e.model)) {
      const auto ref = row(e.name + " (reference)", reference_twin(e.model));
      const std::string attn = fraction(mine.attention_core, ref.attention_core);
      const std::string mlp = fraction(mine.mlp_core, ref.mlp_core);
      out << "  core ratios vs reference: attention " << attn << ", mlp " << mlp << '\n';
      entry["reference"] = {{"attention_core", ref.attention_core},
                            {"mlp_core", ref.mlp_core},
                            {"total", ref.total}};
      entry["attention_ratio"] = attn;
      entry["mlp_ratio"] = mlp;
    }
    res.verdict["models"].push_back(entry);
  }
  write_text(root / "count.csv", csv);
  res.verdict["passed"] = true;
  return res;
}

// ---------------------------------------------------------------- verify

RunResult run_verify(const ExperimentSpec& s, const RunOptions& o) {
  RunResult res;
  res.verdict = verify::run_suite(s.verify);
  res.passed = res.verdict["passed"].get<bool>();
  for (const auto& c : res.verdict["checks"]) {
    *o.out << (c["passed"].get<bool>() ? "PASS  " : "FAIL  ") << std::left << std::setw(36)
           << c["name"].get<std::string>() << " worst " << fmt(c["worst"].get<double>(), 3)
           << " (tol " << fmt(c["tolerance"].get<double>(), 3) << ", "
           << c["instances"].get<std::size_t>() << " instances)\n";
  }
  return res;
}

}  // namespace

json gp_ordering(const std::vector<GpRow>& rows) {
  std::map<std::uint64_t, std::map<std::string, const GpRow*>> by_seed;
  std::vector<std::size_t> depths;
  for (const auto& r : rows) {
    by_seed[r.seed][r.variant] = &r;
    if (r.steps > 0 && std::find(depths.begin(), depths.end(), r.steps) == depths.end()) {
      depths.push_back(r.steps);
    }
  }
  std::sort(depths.begin(), depths.end());
  const std::size_t n = by_seed.size();
  // "At least 4 of 5" generalised to n seeds.
  const std::size_t needed = (4 * n + 4) / 5;
  json out = {{"pairs", json::array()}, {"wins_needed", needed}};
  bool passed = true;
  for (std::size_t i = 1; i < depths.size(); ++i) {
    const std::string a = "cem-t" + std::to_string(depths[i - 1]);
    const std::string b = "cem-t" + std::to_string(depths[i]);
    std::size_t wins = 0, seeds = 0;
    for (const auto& [seed, m] : by_seed) {
      if (!m.count(a) || !m.count(b)) continue;
      ++seeds;
      if (m.at(b)->test_rmse < m.at(a)->test_rmse) ++wins;
    }
    out["pairs"].push_back({{"shallow", depths[i - 1]}, {"deep", depths[i]}, {"wins", wins},
                            {"seeds", seeds}});
    passed = passed && wins >= needed;
  }
  std::vector<double> gated, t1, gaps;
  for (const auto& [seed, m] : by_seed) {
    if (!m.count("gated") || !m.count("cem-t1")) continue;
    gated.push_back(m.at("gated")->test_rmse);
    t1.push_back(m.at("cem-t1")->test_rmse);
    gaps.push_back((t1.back() - gated.back()) / gated.back());
  }
  if (!gaps.empty()) {
    const double gap = (mean(t1) - mean(gated)) / mean(gated);
    out["gated_vs_t1"] = {{"mean_relative_gap", gap},
                          {"worst_relative_gap", *std::max_element(gaps.begin(), gaps.end())},
                          {"within_25_percent", gap <= 0.25}};
    passed = passed && gap <= 0.25;
  }
  out["passed"] = passed;
  return out;
}

RunResult run(const ExperimentSpec& spec, const RunOptions& options) {
  RunOptions o = options;
  if (o.out == nullptr) o.out = &std::cout;
  if (o.log == nullptr) o.log = &std::cerr;
  Log log(*o.log);

  const fs::path root = output_root(spec) / spec_hash(spec);
  fs::create_directories(root);
  write_json(root / "effective_spec.json", to_json(spec));

  RunResult res;
  switch (spec.task) {
    case Task::gp_regression: res = run_gp(spec, root, o, log); break;
    case Task::lm_smoke: res = run_lm(spec, root, o, log); break;
    case Task::lr_sweep: res = run_sweep(spec, root, o, log); break;
    case Task::count: res = run_count(spec, root, o); break;
    case Task::verify: res = run_verify(spec, o); break;
  }
  res.dir = root;
  res.verdict["task"] = to_string(spec.task);
  write_json(root / "verdict.json", res.verdict);
  *o.out << (res.passed ? "verdict: pass" : "verdict: FAIL") << "  (" << root.string() << ")\n";
  return res;
}

}  // namespace cem::cli

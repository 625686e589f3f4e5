#include "plotdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cem/akima.hpp"
#include "cem/error.hpp"

namespace cem::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Record {
  json tags;  // everything except step/split/metric/value
  std::size_t step;
  std::string key;  // "split/metric"
  double value;
};

std::string str(const json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_null()) return "";
  if (j.is_number_float()) {
    std::ostringstream os;
    os.precision(10);
    os << j.get<double>();
    return os.str();
  }
  return j.dump();
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::vector<Record> read_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("metrics directory '" + dir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "metrics.jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Record> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (line.empty()) continue;
      const std::string where = f.string() + ":" + std::to_string(n);
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw DataError(where + ": not a JSON object");
      for (const char* key : {"step", "split", "metric", "value"}) {
        if (!j.contains(key)) throw DataError(where + ": record is missing key '" + key + "'");
      }
      Record r;
      r.step = j["step"].get<std::size_t>();
      r.key = j["split"].get<std::string>() + "/" + j["metric"].get<std::string>();
      r.value = j["value"].is_null() ? std::nan("") : j["value"].get<double>();
      for (const char* key : {"step", "split", "metric", "value"}) j.erase(key);
      r.tags = std::move(j);
      out.push_back(std::move(r));
    }
  }
  if (out.empty()) throw DataError("no metric records under '" + dir.string() + "'");
  return out;
}

// Final value of each metric key per run (runs are identified by tags).
std::map<std::string, std::map<std::string, std::pair<std::size_t, double>>> finals(
    const std::vector<Record>& records, std::map<std::string, json>& tags_of) {
  std::map<std::string, std::map<std::string, std::pair<std::size_t, double>>> out;
  for (const auto& r : records) {
    const std::string run = r.tags.dump();
    tags_of[run] = r.tags;
    auto& slot = out[run][r.key];
    if (r.step >= slot.first) slot = {r.step, r.value};
  }
  return out;
}

void write(const fs::path& path, const std::string& text, PlotData& pd) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  pd.files.push_back(path);
}

}  // namespace

PlotData emit_plotdata(const fs::path& metrics_dir, const fs::path& out_dir,
                       const std::string& lr_metric) {
  const auto records = read_records(metrics_dir);
  fs::create_directories(out_dir);
  PlotData pd;

  std::set<std::string> tag_names;
  for (const auto& r : records) {
    for (const auto& [k, v] : r.tags.items()) tag_names.insert(k);
  }
  std::string csv;
  for (const auto& t : tag_names) csv += t + ",";
  csv += "step,split,metric,value\n";
  for (const auto& r : records) {
    for (const auto& t : tag_names) csv += (r.tags.contains(t) ? str(r.tags[t]) : "") + ",";
    const auto slash = r.key.find('/');
    csv += std::to_string(r.step) + "," + r.key.substr(0, slash) + "," + r.key.substr(slash + 1) +
           "," + num(r.value) + "\n";
  }
  write(out_dir / "runs.csv", csv, pd);

  std::map<std::string, json> tags_of;
  const auto last = finals(records, tags_of);

  if (tag_names.count("lr")) {
    std::string metric = lr_metric;
    if (metric.empty()) {
      metric = "test/rmse";
      for (const auto& [run, m] : last) {
        if (m.count("eval/perplexity")) metric = "eval/perplexity";
      }
    }
    // seed -> (lr -> value)
    std::map<std::uint64_t, std::map<double, double>> curves;
    for (const auto& [run, m] : last) {
      const json& t = tags_of[run];
      if (!t.contains("lr")) continue;
      const auto it = m.find(metric);
      if (it == m.end()) continue;
      curves[t.value("seed", std::uint64_t{0})][t["lr"].get<double>()] = it->second.second;
    }
    if (curves.empty()) throw DataError("no sweep run recorded metric '" + metric + "'");
    std::string lc = "seed,lr," + metric + ",kind\n";
    for (const auto& [seed, curve] : curves) {
      std::vector<double> xs, ys;
      for (const auto& [lr, v] : curve) {
        lc += std::to_string(seed) + "," + num(lr) + "," + num(v) + ",knot\n";
        if (std::isfinite(v)) {
          xs.push_back(std::log10(lr));
          ys.push_back(v);
        }
      }
      if (xs.size() >= 5) {
        const auto best = train::AkimaSpline(xs, ys).argmin();
        const double lr = std::pow(10.0, best.x);
        lc += std::to_string(seed) + "," + num(lr) + "," + num(best.y) + ",akima-argmin\n";
        pd.argmin_lr.emplace_back(seed, lr);
      }
    }
    write(out_dir / "lr_curve.csv", lc, pd);
  } else if (!lr_metric.empty()) {
    throw DataError("no learning-rate sweep found for metric '" + lr_metric + "'");
  }

  if (tag_names.count("T")) {
    std::string tc = "kernel,variant,T,seed,train_rmse,test_rmse\n";
    for (const auto& [run, m] : last) {
      const json& t = tags_of[run];
      if (!t.contains("T")) continue;
      for (const char* key : {"train/rmse", "test/rmse"}) {
        if (!m.count(key)) {
          throw DataError("run " + run + " is missing metric key '" + key + "'");
        }
      }
      tc += str(t.value("kernel", json())) + "," + str(t.value("variant", json())) + "," +
            str(t["T"]) + "," + str(t.value("seed", json())) + "," +
            num(m.at("train/rmse").second) + "," + num(m.at("test/rmse").second) + "\n";
    }
    write(out_dir / "rmse_vs_T.csv", tc, pd);
  }
  return pd;
}

}  // namespace cem::cli

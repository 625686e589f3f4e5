#include "spec.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <type_traits>

#include "cem/error.hpp"

namespace cem::cli {

using nlohmann::json;

namespace {

constexpr std::array kTasks = {Task::gp_regression, Task::lm_smoke, Task::verify,
                               Task::lr_sweep, Task::count};

Task task_from(const std::string& field, const std::string& s) {
  for (Task t : kTasks) {
    if (s == to_string(t)) return t;
  }
  throw ConfigError("field '" + field + "': unknown task '" + s +
                    "' (expected gp-regression, lm-smoke, verify, lr-sweep or count)");
}

// Reads j[key] as T, turning json type errors into a ConfigError naming the
// dotted path.
template <class T>
T field(const json& j, const std::string& key, const std::string& path) {
  try {
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      const json& v = j.at(key);
      if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError("field '" + path + "': expected a non-negative integer");
      }
    }
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("field '" + path + "': " + e.what());
  }
}

template <class T>
std::vector<T> count_list(const json& j, const std::string& key, const std::string& path) {
  const json& v = j.at(key);
  if (!v.is_array()) throw ConfigError("field '" + path + "': expected an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number_integer() || v[i].get<long long>() < 0) {
      throw ConfigError("field '" + path + "[" + std::to_string(i) +
                        "]': expected a non-negative integer");
    }
    out.push_back(v[i].get<T>());
  }
  return out;
}

// Re-raises errors from nested from_json calls with the section prefix.
template <class F>
void nested(const std::string& section, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    const auto quote = msg.find('\'');
    if (quote == std::string::npos) throw ConfigError(section + ": " + msg);
    const std::string rest = msg.substr(quote + 1);
    if (rest.rfind(section + ".", 0) == 0) throw;
    throw ConfigError(msg.substr(0, quote + 1) + section + "." + rest);
  }
}

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("field '" + path + "' must be an object");
}

model::ModelConfig default_model(Task task) {
  return model::preset(task == Task::gp_regression ? "gp-cem" : "lm-desk");
}

train::OptimConfig default_optim(Task task) {
  train::OptimConfig c;
  if (task == Task::gp_regression) {
    c.peak_lr = 3e-3;
    c.total_steps = 12000;
    c.batch_size = 128;
  } else {
    c.peak_lr = 4e-3;
    c.total_steps = 500;
    c.batch_size = 8;
  }
  return c;
}

void parse_data(const json& j, DataSpec& d) {
  require_object(j, "data");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "data." + key;
    if (key == "kernel") {
      // A bare kind selects the desk lengthscale for that kernel.
      if (value.is_string()) {
        d.kernel = data::desk_kernel(data::kernel_kind_from_string(value.get<std::string>()));
      } else {
        if (value.is_object() && value.contains("kind")) {
          d.kernel = data::desk_kernel(
              data::kernel_kind_from_string(field<std::string>(value, "kind", path + ".kind")));
        }
        nested("data", [&] { value.get_to(d.kernel); });
      }
    } else if (key == "n_points") d.n_points = field<std::size_t>(j, key, path);
    else if (key == "train_fraction") d.train_fraction = field<double>(j, key, path);
    else if (key == "input_dim") d.input_dim = field<std::size_t>(j, key, path);
    else if (key == "corpus") d.corpus = field<std::string>(j, key, path);
    else if (key == "seq_len") d.seq_len = field<std::size_t>(j, key, path);
    else if (key == "eval_fraction") d.eval_fraction = field<double>(j, key, path);
    else throw ConfigError("unknown field '" + path + "'");
  }
}

void parse_logging(const json& j, LoggingSpec& l) {
  require_object(j, "logging");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "logging." + key;
    if (key == "log_every") l.log_every = field<std::size_t>(j, key, path);
    else if (key == "eval_every") l.eval_every = field<std::size_t>(j, key, path);
    else if (key == "eval_limit") l.eval_limit = field<std::size_t>(j, key, path);
    else throw ConfigError("unknown field '" + path + "'");
  }
}

void parse_gp(const json& j, GpSpec& g) {
  require_object(j, "gp");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "gp." + key;
    if (key == "steps") g.steps = count_list<std::size_t>(j, key, path);
    else if (key == "gated_baseline") g.gated_baseline = field<bool>(j, key, path);
    else throw ConfigError("unknown field '" + path + "'");
  }
}

void parse_sweep(const json& j, SweepSpec& s) {
  require_object(j, "sweep");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "sweep." + key;
    if (key == "base") s.base = task_from(path, field<std::string>(j, key, path));
    else if (key == "lrs") s.lrs = field<std::vector<double>>(j, key, path);
    else throw ConfigError("unknown field '" + path + "'");
  }
}

void parse_count(const json& j, CountSpec& c) {
  require_object(j, "count");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "count." + key;
    if (key == "seq_len") {
      c.seq_len = field<std::size_t>(j, key, path);
    } else if (key == "models") {
      if (!value.is_array()) throw ConfigError("field '" + path + "' must be an array");
      c.models.clear();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const std::string item = path + "[" + std::to_string(i) + "]";
        const json& e = value[i];
        CountEntry entry;
        if (e.is_string()) {
          entry.name = e.get<std::string>();
          entry.model = model::preset(entry.name);
        } else {
          require_object(e, item);
          for (const auto& [k, v] : e.items()) {
            if (k != "name" && k != "model") {
              throw ConfigError("unknown field '" + item + "." + k + "'");
            }
          }
          entry.name = field<std::string>(e, "name", item + ".name");
          nested(item, [&] { e.at("model").get_to(entry.model); });
        }
        c.models.push_back(std::move(entry));
      }
    } else {
      throw ConfigError("unknown field '" + path + "'");
    }
  }
}

void parse_verify(const json& j, verify::SuiteOptions& v) {
  require_object(j, "verify");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "verify." + key;
    if (key == "equivalence_configs") v.equivalence_configs = field<std::size_t>(j, key, path);
    else if (key == "gradient_instances") v.gradient_instances = field<std::size_t>(j, key, path);
    else if (key == "model_instances") v.model_instances = field<std::size_t>(j, key, path);
    else if (key == "descent_instances") v.descent_instances = field<std::size_t>(j, key, path);
    else if (key == "causality_instances") v.causality_instances = field<std::size_t>(j, key, path);
    else throw ConfigError("unknown field '" + path + "'");
  }
}

// FNV-1a, 64 bit.
std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

const char* to_string(Task task) {
  switch (task) {
    case Task::gp_regression: return "gp-regression";
    case Task::lm_smoke: return "lm-smoke";
    case Task::verify: return "verify";
    case Task::lr_sweep: return "lr-sweep";
    case Task::count: return "count";
  }
  return "?";
}

void ExperimentSpec::validate() const {
  if (version != kSpecVersion) {
    throw ConfigError("field 'version': expected " + std::to_string(kSpecVersion) + ", got " +
                      std::to_string(version));
  }
  if (seeds.empty()) throw ConfigError("field 'seeds': at least one seed is required");
  nested("model", [&] { model.validate(); });
  nested("optim", [&] { optim.validate(); });
  const Task effective = task == Task::lr_sweep ? sweep.base : task;
  if (task == Task::lr_sweep) {
    if (sweep.base != Task::lm_smoke && sweep.base != Task::gp_regression) {
      throw ConfigError("field 'sweep.base': must be lm-smoke or gp-regression");
    }
    if (sweep.lrs.size() < 5) {
      throw ConfigError("field 'sweep.lrs': the Akima fit needs at least 5 learning rates");
    }
    for (std::size_t i = 0; i < sweep.lrs.size(); ++i) {
      if (!(sweep.lrs[i] > 0.0) || (i > 0 && !(sweep.lrs[i] > sweep.lrs[i - 1]))) {
        throw ConfigError("field 'sweep.lrs': must be positive and strictly increasing");
      }
    }
  }
  if (effective == Task::gp_regression) {
    if (model.head != model::TaskHead::regression_scalar) {
      throw ConfigError("field 'model.head': gp-regression needs regression-scalar");
    }
    if (model.input_dim != data.input_dim) {
      throw ConfigError("field 'model.input_dim': must equal data.input_dim (" +
                        std::to_string(data.input_dim) + ")");
    }
    nested("data", [&] { data.kernel.validate(); });
    if (data.n_points < 2) throw ConfigError("field 'data.n_points': must be at least 2");
    if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0)) {
      throw ConfigError("field 'data.train_fraction': must lie in (0, 1)");
    }
    if (gp.steps.empty() && !gp.gated_baseline) {
      throw ConfigError("field 'gp.steps': nothing to train");
    }
    for (std::size_t t : gp.steps) {
      if (t == 0) throw ConfigError("field 'gp.steps': recursion depth must be >= 1");
    }
  }
  if (effective == Task::lm_smoke) {
    if (model.head != model::TaskHead::lm_logits) {
      throw ConfigError("field 'model.head': lm-smoke needs lm-logits");
    }
    if (model.vocab != 256) throw ConfigError("field 'model.vocab': byte corpus needs 256");
    if (data.seq_len < 2) throw ConfigError("field 'data.seq_len': must be at least 2");
    if (!(data.eval_fraction > 0.0 && data.eval_fraction < 1.0)) {
      throw ConfigError("field 'data.eval_fraction': must lie in (0, 1)");
    }
    if (data.corpus.empty()) throw ConfigError("field 'data.corpus': path is empty");
  }
  if (task == Task::count) {
    if (count.models.empty()) throw ConfigError("field 'count.models': empty");
    if (count.seq_len == 0) throw ConfigError("field 'count.seq_len': must be positive");
    for (std::size_t i = 0; i < count.models.size(); ++i) {
      nested("count.models[" + std::to_string(i) + "].model",
             [&] { count.models[i].model.validate(); });
    }
  }
}

ExperimentSpec parse_spec(const json& j) {
  require_object(j, "<root>");
  ExperimentSpec s;
  if (!j.contains("task")) throw ConfigError("field 'task' is required");
  s.task = task_from("task", field<std::string>(j, "task", "task"));
  const Task base = s.task == Task::lr_sweep && j.contains("sweep") && j["sweep"].is_object() &&
                            j["sweep"].contains("base")
                        ? task_from("sweep.base", field<std::string>(j["sweep"], "base", "sweep.base"))
                        : (s.task == Task::lr_sweep ? s.sweep.base : s.task);
  s.model = default_model(base);
  s.optim = default_optim(base);
  if (s.task == Task::count) {
    s.count.models = {{"lm-desk", model::preset("lm-desk")},
                      {"gp-cem", model::preset("gp-cem")}};
  }
  for (const auto& [key, value] : j.items()) {
    if (key == "task") continue;
    if (key == "version") s.version = field<int>(j, key, key);
    else if (key == "model") nested("model", [&] { value.get_to(s.model); });
    else if (key == "optim") nested("optim", [&] { value.get_to(s.optim); });
    else if (key == "data") parse_data(value, s.data);
    else if (key == "logging") parse_logging(value, s.logging);
    else if (key == "gp") parse_gp(value, s.gp);
    else if (key == "sweep") parse_sweep(value, s.sweep);
    else if (key == "count") parse_count(value, s.count);
    else if (key == "verify") parse_verify(value, s.verify);
    else if (key == "seeds") s.seeds = count_list<std::uint64_t>(j, key, key);
    else if (key == "output") s.output = field<std::string>(j, key, key);
    else throw ConfigError("unknown field '" + key + "'");
  }
  // verify seeds its suite from the first spec seed.
  s.verify.seed = s.seeds.empty() ? 0 : s.seeds.front();
  s.validate();
  return s;
}

json to_json(const ExperimentSpec& s) {
  json j;
  j["version"] = s.version;
  j["task"] = to_string(s.task);
  j["model"] = s.model;
  j["optim"] = s.optim;
  j["data"] = {{"kernel", s.data.kernel},
               {"n_points", s.data.n_points},
               {"train_fraction", s.data.train_fraction},
               {"input_dim", s.data.input_dim},
               {"corpus", s.data.corpus},
               {"seq_len", s.data.seq_len},
               {"eval_fraction", s.data.eval_fraction}};
  j["logging"] = {{"log_every", s.logging.log_every},
                  {"eval_every", s.logging.eval_every},
                  {"eval_limit", s.logging.eval_limit}};
  j["gp"] = {{"steps", s.gp.steps}, {"gated_baseline", s.gp.gated_baseline}};
  j["sweep"] = {{"base", to_string(s.sweep.base)}, {"lrs", s.sweep.lrs}};
  json models = json::array();
  for (const auto& e : s.count.models) models.push_back({{"name", e.name}, {"model", e.model}});
  j["count"] = {{"models", models}, {"seq_len", s.count.seq_len}};
  j["verify"] = {{"equivalence_configs", s.verify.equivalence_configs},
                 {"gradient_instances", s.verify.gradient_instances},
                 {"model_instances", s.verify.model_instances},
                 {"descent_instances", s.verify.descent_instances},
                 {"causality_instances", s.verify.causality_instances}};
  j["seeds"] = s.seeds;
  j["output"] = s.output;
  return j;
}

json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open spec file '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("spec file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty segment");
    if (!node->is_object()) {
      throw ConfigError("override '" + key + "': '" + part + "' is under a non-object");
    }
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

std::string spec_hash(const ExperimentSpec& spec) {
  json j = to_json(spec);
  j.erase("seeds");
  j.erase("output");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return os.str().substr(0, 12);
}

std::filesystem::path output_root(const ExperimentSpec& spec) {
  if (!spec.output.empty()) return spec.output;
  if (const char* env = std::getenv("CEM_OUT_ROOT"); env != nullptr && *env != '\0') return env;
  return "out";
}

std::vector<std::uint64_t> parse_index_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  auto number = [&](const std::string& s) {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw ConfigError("'" + text + "' is not a list of non-negative integers");
    }
    return std::stoull(s);
  };
  while (std::getline(ss, item, ',')) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      out.push_back(number(item));
      continue;
    }
    const auto lo = number(item.substr(0, dash));
    const auto hi = number(item.substr(dash + 1));
    if (hi < lo) throw ConfigError("range '" + item + "' is reversed");
    for (auto v = lo; v <= hi; ++v) out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty list '" + text + "'");
  return out;
}

}  // namespace cem::cli

#include "fedfreeze/scenario.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fedfreeze/text.hpp"

namespace fedfreeze {

namespace {

struct Problem {
  std::string path;
  std::string message;
};

std::optional<Problem> find_problem(const Scenario& s) {
  auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
  auto non_negative = [](double v) { return v >= 0.0 && std::isfinite(v); };
  if (s.rounds == 0) return Problem{"rounds", "must be positive"};
  if (s.devices == 0) return Problem{"devices", "must be positive"};
  if (s.per_round == 0 || s.per_round > s.devices) {
    return Problem{"per_round", "must lie in 1.." + std::to_string(s.devices)};
  }
  if (s.samples_per_device == 0) return Problem{"samples_per_device", "must be positive"};
  if (!positive(s.learning_rate)) return Problem{"learning_rate", "must be positive"};
  if (s.batch_size == 0) return Problem{"batch_size", "must be positive"};
  if (s.batches_per_round == 0) return Problem{"batches_per_round", "must be positive"};
  if (s.calibration_batch_size == 0) return Problem{"calibration_batch_size", "must be positive"};

  if (s.topology.stages.empty()) return Problem{"topology.stages", "needs at least one conv stage"};
  if (s.topology.classes < 2) return Problem{"topology.classes", "must be at least 2"};
  try {
    s.topology.build().validate();
  } catch (const Error& e) {
    return Problem{"topology", e.what()};
  }

  if (s.synthetic.has_value() == s.idx.has_value()) {
    return Problem{"dataset", "exactly one of 'synthetic' and 'idx' must be given"};
  }
  if (s.synthetic) {
    if (!non_negative(s.synthetic->class_separation)) {
      return Problem{"dataset.synthetic.class_separation", "must be non-negative"};
    }
    if (!non_negative(s.synthetic->noise_sigma)) return Problem{"dataset.synthetic.noise_sigma", "must be non-negative"};
    if (s.synthetic->test_samples == 0) return Problem{"dataset.synthetic.test_samples", "must be positive"};
  }

  if (s.device_classes.empty()) return Problem{"device_classes", "needs at least one class"};
  double total = 0.0;
  std::set<std::string> names;
  for (std::size_t i = 0; i < s.device_classes.size(); ++i) {
    const ScenarioDeviceClass& c = s.device_classes[i];
    const std::string at = "device_classes[" + std::to_string(i) + "].";
    if (c.name.empty()) return Problem{at + "name", "must not be empty"};
    if (!names.insert(c.name).second) return Problem{at + "name", "duplicate class name '" + c.name + "'"};
    if (!positive(c.fraction)) return Problem{at + "fraction", "must be positive"};
    total += c.fraction;
    if (!positive(c.float_mac_rate)) return Problem{at + "float_mac_rate", "must be positive"};
    if (!(c.quant_cost_factor > 0.0 && c.quant_cost_factor <= 1.0)) {
      return Problem{at + "quant_cost_factor", "must lie in (0, 1]"};
    }
    if (!non_negative(c.overhead_per_batch)) return Problem{at + "overhead_per_batch", "must be non-negative"};
    for (const auto& [key, b] : {std::pair{"time_budget", c.time_budget}, std::pair{"upload_budget", c.upload_budget}}) {
      if (b.kind != Budget::Kind::unlimited && !(b.value >= 0.0)) {
        return Problem{at + key, "must be non-negative"};
      }
    }
    if (c.upload_budget_range) {
      if (c.upload_budget.kind != Budget::Kind::unlimited) {
        return Problem{at + "upload_budget_range", "conflicts with a fixed upload budget"};
      }
      if (!(c.upload_budget_range->low >= 0.0 && c.upload_budget_range->low <= c.upload_budget_range->high &&
            std::isfinite(c.upload_budget_range->high))) {
        return Problem{at + "upload_budget_range", "must satisfy 0 <= low <= high"};
      }
    }
    if (!non_negative(c.straggler_sigma)) return Problem{at + "straggler_sigma", "must be non-negative"};
  }
  if (std::abs(total - 1.0) > 1e-6) {
    return Problem{"device_classes", "fractions sum to " + format_double(total) + ", expected 1"};
  }
  return std::nullopt;
}

// Records where each key path was found so validation errors can cite lines.
class Reader {
 public:
  std::map<std::string, YAML::Mark> marks;

  [[noreturn]] static void fail(const YAML::Mark& mark, const std::string& msg) {
    if (mark.line >= 0) throw ScenarioError("line " + std::to_string(mark.line + 1) + ": " + msg);
    throw ScenarioError(msg);
  }

  // Checks `node` is a map whose keys all belong to `allowed`.
  void expect_map(const YAML::Node& node, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!node.IsMap()) fail(node.Mark(), (path.empty() ? "document" : path) + " must be a mapping");
    marks.emplace(path, node.Mark());
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& kv : node) {
      const std::string key = kv.first.as<std::string>();
      if (!ok.count(key)) fail(kv.first.Mark(), "unknown key '" + join(path, key) + "'");
      marks[join(path, key)] = kv.first.Mark();
    }
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

  template <typename T>
  void get(const YAML::Node& map, const char* key, const std::string& path, T& out) {
    const YAML::Node n = map[key];
    if (n) out = convert<T>(n, join(path, key));
  }

  template <typename T>
  T convert(const YAML::Node& n, const std::string& what) {
    if (!n.IsScalar()) fail(n.Mark(), what + " must be a scalar");
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        const std::string text = n.Scalar();
        if (!text.empty() && text[0] == '-') fail(n.Mark(), what + " must be a non-negative integer");
        return n.as<std::uint64_t>();
      } else {
        return n.as<T>();
      }
    } catch (const YAML::BadConversion&) {
      fail(n.Mark(), what + ": cannot read '" + n.Scalar() + "'");
    }
  }

  Budget budget(const YAML::Node& map, const std::string& path, const char* key) {
    const std::string fraction_key = std::string(key) + "_fraction";
    const YAML::Node abs = map[key];
    const YAML::Node frac = map[fraction_key];
    if (abs && frac) fail(frac.Mark(), join(path, fraction_key) + " conflicts with " + join(path, key));
    if (abs) {
      if (abs.IsScalar() && abs.Scalar() == "unlimited") return {};
      const double v = convert<double>(abs, join(path, key));
      if (std::isinf(v) && v > 0) return {};
      return {Budget::Kind::absolute, v};
    }
    if (frac) return {Budget::Kind::fraction, convert<double>(frac, join(path, fraction_key))};
    return {};
  }

  std::optional<BudgetRange> range(const YAML::Node& map, const std::string& path) {
    const YAML::Node abs = map["upload_budget_range"];
    const YAML::Node frac = map["upload_budget_fraction_range"];
    if (abs && frac) fail(frac.Mark(), join(path, "upload_budget_fraction_range") + " conflicts with upload_budget_range");
    const YAML::Node n = abs ? abs : frac;
    if (!n) return std::nullopt;
    const std::string what = join(path, abs ? "upload_budget_range" : "upload_budget_fraction_range");
    if (!n.IsSequence() || n.size() != 2) fail(n.Mark(), what + " must be a [low, high] pair");
    return BudgetRange{static_cast<bool>(frac), convert<double>(n[0], what), convert<double>(n[1], what)};
  }

  std::string locate(const std::string& path) const {
    // nearest recorded ancestor
    std::string p = path;
    while (true) {
      const auto it = marks.find(p);
      if (it != marks.end() && it->second.line >= 0) return "line " + std::to_string(it->second.line + 1) + ": ";
      const auto cut = p.find_last_of(".[");
      if (cut == std::string::npos) return "";
      p = p.substr(0, cut);
    }
  }
};

}  // namespace

std::vector<ScenarioDeviceClass> default_device_classes() {
  ScenarioDeviceClass c;
  c.name = "default";
  return {c};
}

Topology TopologySpec::build() const { return make_topology(image_channels, image_size, stages, classes, kernel); }

void Scenario::validate() const {
  if (const auto p = find_problem(*this)) throw ScenarioError(p->path + ": " + p->message);
}

Scenario parse_scenario(const std::string& text, const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    Reader::fail(e.mark, "malformed YAML: " + e.msg);
  }
  Scenario s;
  Reader r;
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  r.expect_map(root, "",
               {"seed", "rounds", "devices", "per_round", "samples_per_device", "learning_rate", "batch_size",
                "batches_per_round", "calibration_batch_size", "quantize_frozen", "topology", "dataset",
                "device_classes"});
  r.get(root, "seed", "", s.seed);
  r.get(root, "rounds", "", s.rounds);
  r.get(root, "devices", "", s.devices);
  r.get(root, "per_round", "", s.per_round);
  r.get(root, "samples_per_device", "", s.samples_per_device);
  r.get(root, "learning_rate", "", s.learning_rate);
  r.get(root, "batch_size", "", s.batch_size);
  r.get(root, "batches_per_round", "", s.batches_per_round);
  r.get(root, "calibration_batch_size", "", s.calibration_batch_size);
  r.get(root, "quantize_frozen", "", s.quantize_frozen);

  if (const YAML::Node t = root["topology"]) {
    r.expect_map(t, "topology", {"image_channels", "image_size", "classes", "kernel", "stages"});
    r.get(t, "image_channels", "topology", s.topology.image_channels);
    r.get(t, "image_size", "topology", s.topology.image_size);
    r.get(t, "classes", "topology", s.topology.classes);
    r.get(t, "kernel", "topology", s.topology.kernel);
    if (const YAML::Node st = t["stages"]) {
      if (!st.IsSequence()) Reader::fail(st.Mark(), "topology.stages must be a list");
      s.topology.stages.clear();
      for (std::size_t i = 0; i < st.size(); ++i) {
        const std::string path = "topology.stages[" + std::to_string(i) + "]";
        r.expect_map(st[i], path, {"channels", "stride", "kernel"});
        if (!st[i]["channels"]) Reader::fail(st[i].Mark(), path + " needs 'channels'");
        ConvStage stage{0};
        r.get(st[i], "channels", path, stage.out_channels);
        r.get(st[i], "stride", path, stage.stride);
        r.get(st[i], "kernel", path, stage.kernel);
        s.topology.stages.push_back(stage);
      }
    }
  }

  if (const YAML::Node d = root["dataset"]) {
    r.expect_map(d, "dataset", {"synthetic", "idx"});
    s.synthetic.reset();
    if (const YAML::Node syn = d["synthetic"]) {
      SyntheticSource src;
      if (!syn.IsNull()) {
        r.expect_map(syn, "dataset.synthetic", {"class_separation", "noise_sigma", "test_samples"});
        r.get(syn, "class_separation", "dataset.synthetic", src.class_separation);
        r.get(syn, "noise_sigma", "dataset.synthetic", src.noise_sigma);
        r.get(syn, "test_samples", "dataset.synthetic", src.test_samples);
      }
      s.synthetic = src;
    }
    if (const YAML::Node idx = d["idx"]) {
      r.expect_map(idx, "dataset.idx", {"train_images", "train_labels", "test_images", "test_labels"});
      IdxSource src;
      for (auto [key, field] : {std::pair{"train_images", &src.train_images}, std::pair{"train_labels", &src.train_labels},
                                std::pair{"test_images", &src.test_images}, std::pair{"test_labels", &src.test_labels}}) {
        if (!idx[key]) Reader::fail(idx.Mark(), std::string("dataset.idx needs '") + key + "'");
        std::string value;
        r.get(idx, key, "dataset.idx", value);
        std::filesystem::path p(value);
        *field = p.is_absolute() || base_dir.empty() ? p : std::filesystem::absolute(base_dir / p).lexically_normal();
      }
      s.idx = src;
    }
  }

  if (const YAML::Node dc = root["device_classes"]) {
    if (!dc.IsSequence()) Reader::fail(dc.Mark(), "device_classes must be a list");
    s.device_classes.clear();
    for (std::size_t i = 0; i < dc.size(); ++i) {
      const std::string path = "device_classes[" + std::to_string(i) + "]";
      const YAML::Node n = dc[i];
      r.expect_map(n, path,
                   {"name", "fraction", "float_mac_rate", "quant_cost_factor", "overhead_per_batch", "time_budget",
                    "time_budget_fraction", "upload_budget", "upload_budget_fraction", "upload_budget_range",
                    "upload_budget_fraction_range", "straggler_sigma"});
      ScenarioDeviceClass c;
      c.name = "class" + std::to_string(i);
      r.get(n, "name", path, c.name);
      r.get(n, "fraction", path, c.fraction);
      r.get(n, "float_mac_rate", path, c.float_mac_rate);
      r.get(n, "quant_cost_factor", path, c.quant_cost_factor);
      r.get(n, "overhead_per_batch", path, c.overhead_per_batch);
      c.time_budget = r.budget(n, path, "time_budget");
      c.upload_budget = r.budget(n, path, "upload_budget");
      c.upload_budget_range = r.range(n, path);
      r.get(n, "straggler_sigma", path, c.straggler_sigma);
      s.device_classes.push_back(c);
    }
  }

  if (const auto p = find_problem(s)) throw ScenarioError(r.locate(p->path) + p->path + ": " + p->message);
  return s;
}

DataGenSpec parse_datagen_spec(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    Reader::fail(e.mark, "malformed YAML: " + e.msg);
  }
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  Reader r;
  r.expect_map(root, "", {"classes", "image_size", "channels", "class_separation", "noise_sigma", "train_samples",
                          "test_samples", "seed"});
  DataGenSpec g;
  r.get(root, "classes", "", g.classes);
  r.get(root, "image_size", "", g.image_size);
  r.get(root, "channels", "", g.channels);
  r.get(root, "class_separation", "", g.class_separation);
  r.get(root, "noise_sigma", "", g.noise_sigma);
  r.get(root, "train_samples", "", g.train_samples);
  r.get(root, "test_samples", "", g.test_samples);
  r.get(root, "seed", "", g.seed);
  if (g.classes > 256) Reader::fail(r.marks["classes"], "classes must fit in an IDX label byte");
  return g;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open scenario " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  try {
    return parse_scenario(text.str(), path.parent_path());
  } catch (const ScenarioError& e) {
    throw ScenarioError(path.string() + ": " + e.what());
  }
}

namespace {

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

std::string number(double v) {
  if (std::isinf(v)) return v > 0 ? ".inf" : "-.inf";
  const std::string s = format_double(v);
  // keep floats recognisable as floats to YAML readers
  return s.find_first_of(".e") == std::string::npos ? s + ".0" : s;
}

void emit_budget(std::ostream& out, const char* key, const Budget& b) {
  switch (b.kind) {
    case Budget::Kind::unlimited:
      out << "    " << key << ": unlimited\n";
      break;
    case Budget::Kind::absolute:
      out << "    " << key << ": " << number(b.value) << '\n';
      break;
    case Budget::Kind::fraction:
      out << "    " << key << "_fraction: " << number(b.value) << '\n';
      break;
  }
}

}  // namespace

std::string emit_scenario(const Scenario& s) {
  std::ostringstream out;
  out << "seed: " << s.seed << '\n'
      << "rounds: " << s.rounds << '\n'
      << "devices: " << s.devices << '\n'
      << "per_round: " << s.per_round << '\n'
      << "samples_per_device: " << s.samples_per_device << '\n'
      << "learning_rate: " << number(s.learning_rate) << '\n'
      << "batch_size: " << s.batch_size << '\n'
      << "batches_per_round: " << s.batches_per_round << '\n'
      << "calibration_batch_size: " << s.calibration_batch_size << '\n'
      << "quantize_frozen: " << (s.quantize_frozen ? "true" : "false") << '\n';
  out << "topology:\n"
      << "  image_channels: " << s.topology.image_channels << '\n'
      << "  image_size: " << s.topology.image_size << '\n'
      << "  classes: " << s.topology.classes << '\n'
      << "  kernel: " << s.topology.kernel << '\n'
      << "  stages:\n";
  for (const ConvStage& st : s.topology.stages) {
    out << "    - {channels: " << st.out_channels << ", stride: " << st.stride;
    if (st.kernel != 0) out << ", kernel: " << st.kernel;
    out << "}\n";
  }
  out << "dataset:\n";
  if (s.synthetic) {
    out << "  synthetic:\n"
        << "    class_separation: " << number(s.synthetic->class_separation) << '\n'
        << "    noise_sigma: " << number(s.synthetic->noise_sigma) << '\n'
        << "    test_samples: " << s.synthetic->test_samples << '\n';
  }
  if (s.idx) {
    out << "  idx:\n"
        << "    train_images: " << quoted(s.idx->train_images.string()) << '\n'
        << "    train_labels: " << quoted(s.idx->train_labels.string()) << '\n'
        << "    test_images: " << quoted(s.idx->test_images.string()) << '\n'
        << "    test_labels: " << quoted(s.idx->test_labels.string()) << '\n';
  }
  out << "device_classes:\n";
  for (const ScenarioDeviceClass& c : s.device_classes) {
    out << "  - name: " << quoted(c.name) << '\n'
        << "    fraction: " << number(c.fraction) << '\n'
        << "    float_mac_rate: " << number(c.float_mac_rate) << '\n'
        << "    quant_cost_factor: " << number(c.quant_cost_factor) << '\n'
        << "    overhead_per_batch: " << number(c.overhead_per_batch) << '\n';
    emit_budget(out, "time_budget", c.time_budget);
    emit_budget(out, "upload_budget", c.upload_budget);
    if (c.upload_budget_range) {
      out << "    " << (c.upload_budget_range->fraction ? "upload_budget_fraction_range" : "upload_budget_range")
          << ": [" << number(c.upload_budget_range->low) << ", " << number(c.upload_budget_range->high) << "]\n";
    }
    out << "    straggler_sigma: " << number(c.straggler_sigma) << '\n';
  }
  return out.str();
}

}  // namespace fedfreeze

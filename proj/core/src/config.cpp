#include "psinet/config.hpp"

#include <fstream>
#include <set>

#include "psinet/error.hpp"

namespace psinet {

using nlohmann::json;

namespace {

/// Field accessor that reports errors by dotted path.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("", "must be an object");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const std::string where = key.empty() ? path_ : (path_.empty() ? key : path_ + "." + key);
    throw ConfigError((where.empty() ? std::string("config") : where) + ": " + msg);
  }

  void allow(std::initializer_list<const char*> keys) const {
    std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [k, v] : j_.items()) {
      if (!ok.contains(k)) fail(k, "unknown key");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <class T>
  T get(const char* key, T fallback) const {
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(key, "has the wrong type");
    }
  }

  std::size_t count(const char* key, std::size_t fallback) const {
    if (!j_.contains(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      fail(key, "must be a non-negative integer");
    }
    return v.get<std::size_t>();
  }

  std::uint64_t seed(const char* key, std::uint64_t fallback) const {
    if (!j_.contains(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(key, "must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

  Section sub(const char* key) const {
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, path_.empty() ? key : path_ + "." + key);
  }

  const json& raw(const char* key) const { return j_.at(key); }
  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
};

json layer_to_json(const LayerDescriptor& l) {
  return {{"kind", std::string(to_string(l.kind))}, {"name", l.name}, {"in", l.in},
          {"out", l.out}, {"kernel", l.kernel}, {"stride", l.stride},
          {"pad", l.pad}, {"groups", l.groups}};
}

LayerDescriptor layer_from_json(const json& j, std::size_t index) {
  const Section s(j, "architecture.layers[" + std::to_string(index) + "]");
  s.allow({"kind", "name", "in", "out", "kernel", "stride", "pad", "groups"});
  LayerDescriptor l;
  try {
    l.kind = layer_kind_from_string(s.get<std::string>("kind", ""));
  } catch (const ConfigError& e) {
    s.fail("kind", e.what());
  }
  l.name = s.get<std::string>("name", "");
  l.in = s.count("in", 0);
  l.out = s.count("out", l.kind == LayerKind::batch_norm || l.kind == LayerKind::group_norm
                             ? l.in
                             : 0);
  if (l.is_norm()) l.in = l.out;
  l.kernel = s.count("kernel", l.kind == LayerKind::maxpool ? 2 : l.is_conv() ? 3 : 0);
  l.stride = s.count("stride", l.kind == LayerKind::maxpool ? 2 : 1);
  l.pad = s.count("pad", 0);
  l.groups = s.count("groups", 1);
  return l;
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  const Section root(j, "");
  root.allow({"name", "seed", "output_dir", "dataset", "architecture", "psinet", "partition",
              "federation", "strategies", "probe"});
  ExperimentConfig c;
  c.name = root.get<std::string>("name", c.name);
  c.seed = root.seed("seed", c.seed);
  c.output_dir = root.get<std::string>("output_dir", "runs/" + c.name);

  {
    const Section s = root.sub("dataset");
    s.allow({"kind", "classes", "per_class", "test_per_class", "height", "width", "channels",
             "noise", "seed", "path", "standardize", "train_per_class"});
    auto& d = c.dataset;
    d.kind = s.get<std::string>("kind", d.kind);
    if (d.kind != "synthetic" && d.kind != "cifar10" && d.kind != "cifar100" && d.kind != "file") {
      s.fail("kind", "must be synthetic, cifar10, cifar100 or file");
    }
    d.synth.classes = s.count("classes", d.synth.classes);
    d.synth.per_class = s.count("per_class", d.synth.per_class);
    d.test_per_class = s.count("test_per_class", d.test_per_class);
    d.synth.height = s.count("height", d.synth.height);
    d.synth.width = s.count("width", d.synth.width);
    d.synth.channels = s.count("channels", d.synth.channels);
    d.synth.noise = s.get<float>("noise", d.synth.noise);
    d.synth.seed = s.seed("seed", c.seed);
    d.path = s.get<std::string>("path", "");
    d.standardize = s.get<bool>("standardize", false);
    d.train_per_class = s.count("train_per_class", 0);
    if (d.kind == "synthetic") {
      if (d.synth.classes < 2) s.fail("classes", "must be >= 2");
      if (d.synth.per_class < 1) s.fail("per_class", "must be >= 1");
      if (d.test_per_class < 1) s.fail("test_per_class", "must be >= 1");
      if (!(d.synth.noise >= 0.0f)) s.fail("noise", "must be >= 0");
    }
  }
  {
    const Section s = root.sub("architecture");
    s.allow({"preset", "width", "norm", "norm_groups", "layers"});
    auto& a = c.architecture;
    a.preset = s.get<std::string>("preset", a.preset);
    if (a.preset != "desk_cnn" && a.preset != "vgg9" && a.preset != "vgg16" && a.preset != "custom") {
      s.fail("preset", "must be desk_cnn, vgg9, vgg16 or custom");
    }
    a.width = s.count("width", a.preset == "vgg9" ? 32 : a.preset == "vgg16" ? 64 : a.width);
    if (a.width < 1) s.fail("width", "must be >= 1");
    a.norm = s.get<std::string>("norm", a.norm);
    if (a.norm != "batch_norm" && a.norm != "group_norm" && a.norm != "none") {
      s.fail("norm", "must be batch_norm, group_norm or none");
    }
    a.norm_groups = s.count("norm_groups", a.norm_groups);
    if (a.norm_groups < 1) s.fail("norm_groups", "must be >= 1");
    if (s.has("layers")) {
      const json& layers = s.raw("layers");
      if (!layers.is_array()) s.fail("layers", "must be an array");
      for (std::size_t i = 0; i < layers.size(); ++i) a.layers.push_back(layer_from_json(layers[i], i));
    }
    if (a.preset == "custom" && a.layers.empty()) s.fail("layers", "required for preset custom");
  }
  {
    const Section s = root.sub("psinet");
    s.allow({"groups", "shared_depth", "auto_alpha", "pretrain_epochs", "shared_norm",
             "class_order"});
    auto& p = c.psinet;
    p.groups = s.count("groups", c.dataset.kind == "synthetic" ? c.dataset.synth.classes
                                 : c.dataset.kind == "cifar100" ? 100 : 10);
    if (s.has("shared_depth")) {
      const json& v = s.raw("shared_depth");
      if (v.is_string()) {
        p.shared_depth = v.get<std::string>();
      } else if (v.is_number_integer()) {
        p.shared_depth = std::to_string(v.get<long long>());
      } else {
        s.fail("shared_depth", "must be a layer name, a layer index, \"none\" or \"auto\"");
      }
    }
    p.auto_alpha = s.get<double>("auto_alpha", p.auto_alpha);
    if (!(p.auto_alpha > 0.0 && p.auto_alpha <= 1.0)) s.fail("auto_alpha", "must lie in (0, 1]");
    p.pretrain_epochs = s.count("pretrain_epochs", p.pretrain_epochs);
    const std::string norm = s.get<std::string>("shared_norm", "batch_norm");
    if (norm == "batch_norm") {
      p.shared_norm = SharedNorm::batch_norm;
    } else if (norm == "group_norm") {
      p.shared_norm = SharedNorm::group_norm;
    } else {
      s.fail("shared_norm", "must be batch_norm or group_norm");
    }
    p.class_order = s.get<std::vector<std::size_t>>("class_order", {});
  }
  {
    const Section s = root.sub("partition");
    s.allow({"scheme", "nodes", "classes_per_node", "alpha", "min_samples", "seed"});
    auto& p = c.partition;
    try {
      p.scheme = partition_scheme_from_string(s.get<std::string>("scheme", "iid"));
    } catch (const ConfigError& e) {
      s.fail("scheme", e.what());
    }
    p.nodes = s.count("nodes", 10);
    if (p.nodes < 1) s.fail("nodes", "must be >= 1");
    p.classes_per_node = s.count("classes_per_node", 0);
    if (p.scheme == PartitionScheme::classes_per_node && p.classes_per_node < 1) {
      s.fail("classes_per_node", "must be >= 1 for scheme classes_per_node");
    }
    p.alpha = s.get<double>("alpha", p.alpha);
    if (!(p.alpha > 0.0)) s.fail("alpha", "must be > 0");
    p.min_samples = s.count("min_samples", p.min_samples);
    p.seed = s.seed("seed", c.seed);
  }
  {
    const Section s = root.sub("federation");
    s.allow({"rounds", "local_epochs", "batch_size", "lr", "momentum", "weight_decay", "mu",
             "trimming", "weighted", "empty_group_policy", "seed", "init_seed", "threads"});
    auto& f = c.federation;
    f.rounds = s.count("rounds", f.rounds);
    f.local_epochs = s.count("local_epochs", f.local_epochs);
    f.batch_size = s.count("batch_size", f.batch_size);
    f.lr = s.get<float>("lr", f.lr);
    f.momentum = s.get<float>("momentum", f.momentum);
    f.weight_decay = s.get<float>("weight_decay", f.weight_decay);
    f.mu = s.get<float>("mu", 0.01f);
    f.trimming = s.get<bool>("trimming", f.trimming);
    f.weighted = s.get<bool>("weighted", f.weighted);
    try {
      f.empty_group = empty_group_policy_from_string(
          s.get<std::string>("empty_group_policy", "carry_forward"));
    } catch (const ConfigError& e) {
      s.fail("empty_group_policy", e.what());
    }
    f.seed = s.seed("seed", c.seed);
    f.init_seed = s.seed("init_seed", c.seed);
    f.threads = s.count("threads", f.threads);
    try {
      f.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("strategies")) {
    const json& v = j.at("strategies");
    if (!v.is_array() || v.empty()) throw ConfigError("strategies: must be a non-empty array");
    c.strategies.clear();
    for (const auto& s : v) {
      if (!s.is_string()) throw ConfigError("strategies: entries must be strings");
      try {
        c.strategies.push_back(strategy_from_string(s.get<std::string>()));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("strategies: ") + e.what());
      }
    }
  }
  {
    const Section s = root.sub("probe");
    s.allow({"batches_per_class", "batch_size", "layers"});
    auto& p = c.probe;
    p.batches_per_class = s.count("batches_per_class", p.batches_per_class);
    p.batch_size = s.count("batch_size", p.batch_size);
    if (p.batches_per_class < 1) s.fail("batches_per_class", "must be >= 1");
    if (p.batch_size < 1) s.fail("batch_size", "must be >= 1");
    p.layers = s.get<std::vector<std::string>>("layers", {});
  }
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  const auto& d = c.dataset;
  j["dataset"] = {{"kind", d.kind},
                  {"classes", d.synth.classes},
                  {"per_class", d.synth.per_class},
                  {"test_per_class", d.test_per_class},
                  {"height", d.synth.height},
                  {"width", d.synth.width},
                  {"channels", d.synth.channels},
                  {"noise", d.synth.noise},
                  {"seed", d.synth.seed},
                  {"path", d.path},
                  {"standardize", d.standardize},
                  {"train_per_class", d.train_per_class}};
  const auto& a = c.architecture;
  j["architecture"] = {{"preset", a.preset}, {"width", a.width}, {"norm", a.norm},
                       {"norm_groups", a.norm_groups}};
  if (!a.layers.empty()) {
    json layers = json::array();
    for (const auto& l : a.layers) layers.push_back(layer_to_json(l));
    j["architecture"]["layers"] = layers;
  }
  const auto& p = c.psinet;
  j["psinet"] = {{"groups", p.groups},
                 {"shared_depth", p.shared_depth},
                 {"auto_alpha", p.auto_alpha},
                 {"pretrain_epochs", p.pretrain_epochs},
                 {"shared_norm", p.shared_norm == SharedNorm::batch_norm ? "batch_norm" : "group_norm"},
                 {"class_order", p.class_order}};
  const auto& q = c.partition;
  j["partition"] = {{"scheme", std::string(to_string(q.scheme))},
                    {"nodes", q.nodes},
                    {"classes_per_node", q.classes_per_node},
                    {"alpha", q.alpha},
                    {"min_samples", q.min_samples},
                    {"seed", q.seed}};
  const auto& f = c.federation;
  j["federation"] = {{"rounds", f.rounds},
                     {"local_epochs", f.local_epochs},
                     {"batch_size", f.batch_size},
                     {"lr", f.lr},
                     {"momentum", f.momentum},
                     {"weight_decay", f.weight_decay},
                     {"mu", f.mu},
                     {"trimming", f.trimming},
                     {"weighted", f.weighted},
                     {"empty_group_policy", std::string(to_string(f.empty_group))},
                     {"seed", f.seed},
                     {"init_seed", f.init_seed},
                     {"threads", f.threads}};
  json strategies = json::array();
  for (Strategy s : c.strategies) strategies.push_back(std::string(to_string(s)));
  j["strategies"] = strategies;
  j["probe"] = {{"batches_per_class", c.probe.batches_per_class},
                {"batch_size", c.probe.batch_size},
                {"layers", c.probe.layers}};
  return j;
}

ArchitectureSpec make_architecture(const ExperimentConfig& c, const Shape& input_shape,
                                   std::size_t num_classes) {
  const auto& a = c.architecture;
  ArchitectureSpec spec;
  if (a.preset == "desk_cnn") {
    spec = desk_cnn(input_shape, num_classes, a.width);
  } else if (a.preset == "vgg9") {
    spec = vgg9(input_shape, num_classes, a.width);
  } else if (a.preset == "vgg16") {
    spec = vgg16(input_shape, num_classes, a.width);
  } else {
    spec.name = "custom";
    spec.input_shape = input_shape;
    spec.num_classes = num_classes;
    spec.layers = a.layers;
    infer_shapes(spec);
    return spec;
  }
  if (a.norm != "batch_norm") {
    std::vector<LayerDescriptor> layers;
    for (auto& l : spec.layers) {
      if (l.kind != LayerKind::batch_norm) {
        layers.push_back(l);
      } else if (a.norm == "group_norm") {
        layers.push_back(LayerDescriptor::group_norm("gn" + l.name.substr(2), l.out, a.norm_groups));
      }
    }
    spec.layers = std::move(layers);
    infer_shapes(spec);
  }
  return spec;
}

void validate(const ExperimentConfig& c) {
  const bool psinet = std::find(c.strategies.begin(), c.strategies.end(), Strategy::psinet) !=
                      c.strategies.end();
  if (c.dataset.kind != "synthetic") return;  // shapes depend on files; checked at load
  const std::size_t C = c.dataset.synth.classes;
  if (c.partition.scheme == PartitionScheme::classes_per_node) {
    if (c.partition.classes_per_node > C) {
      throw ConfigError("partition.classes_per_node: " + std::to_string(c.partition.classes_per_node) +
                        " exceeds the " + std::to_string(C) + " dataset classes");
    }
    if (c.partition.nodes * c.partition.classes_per_node < C) {
      throw ConfigError("partition.classes_per_node: " + std::to_string(c.partition.nodes) +
                        " nodes cannot cover " + std::to_string(C) + " classes");
    }
  }
  const Shape input{c.dataset.synth.channels, c.dataset.synth.height, c.dataset.synth.width};
  ArchitectureSpec base;
  try {
    base = make_architecture(c, input, C);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("architecture: ") + e.what());
  }
  if (!psinet) return;
  if (c.psinet.groups < 1 || c.psinet.groups > C) {
    throw ConfigError("psinet.groups: must lie in [1, " + std::to_string(C) + "]");
  }
  if (c.psinet.shared_depth == "auto") return;
  GroupMapping m;
  try {
    m = default_mapping(C, c.psinet.groups, c.psinet.class_order);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("psinet: ") + e.what());
  }
  try {
    if (c.psinet.shared_depth == "none") {
      m.shared_depth = -1;
    } else if (!c.psinet.shared_depth.empty() &&
               c.psinet.shared_depth.find_first_not_of("-0123456789") == std::string::npos) {
      m.shared_depth = std::stoll(c.psinet.shared_depth);
    } else {
      m.shared_depth = static_cast<std::ptrdiff_t>(
          block_end(base, base.layer_index(c.psinet.shared_depth)));
    }
    build_psinet(base, m, {c.psinet.shared_norm});
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("psinet.shared_depth/groups: ") + e.what());
  }
}

}  // namespace psinet

#include "psmt/harness/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "psmt/error.hpp"

namespace psmt::harness {

using nlohmann::json;

std::string to_string(Method m) {
  switch (m) {
    case Method::source: return "source";
    case Method::bn_adapt: return "bn_adapt";
    case Method::plain_mt: return "plain_mt";
    case Method::psmt: return "psmt";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (auto m : {Method::source, Method::bn_adapt, Method::plain_mt, Method::psmt})
    if (to_string(m) == name) return m;
  throw ValidationError("unknown method '" + name + "'");
}

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  if (text.find_first_not_of(" \t") == std::string::npos) return out;
  std::istringstream in(text + ",");
  while (std::getline(in, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    if (a == std::string::npos) throw ValidationError("empty item in list '" + text + "'");
    out.push_back(item.substr(a, item.find_last_not_of(" \t") - a + 1));
  }
  return out;
}

const char* label_rule_name(LabelRule r) {
  return r == LabelRule::argmax_pseudo ? "argmax-pseudo" : "soft-expectation";
}

LabelRule parse_label_rule(const std::string& s) {
  if (s == "argmax-pseudo") return LabelRule::argmax_pseudo;
  if (s == "soft-expectation") return LabelRule::soft_expectation;
  throw ValidationError("unknown label_rule '" + s + "'");
}

const char* mode_name(ForwardMode m) {
  switch (m) {
    case ForwardMode::train_stats: return "train-stats";
    case ForwardMode::frozen_stats: return "frozen-stats";
    case ForwardMode::recompute_stats: return "recompute-stats";
  }
  return "?";
}

ForwardMode parse_mode(const std::string& s) {
  for (auto m : {ForwardMode::train_stats, ForwardMode::frozen_stats, ForwardMode::recompute_stats})
    if (s == mode_name(m)) return m;
  throw ValidationError("unknown forward mode '" + s + "'");
}

/// Reads keys of one JSON object into typed fields, recording every problem.
class Section {
 public:
  Section(const json& doc, std::string path, Violations& v) : path_(std::move(path)), v_(v) {
    if (doc.is_null()) return;
    if (!doc.is_object()) {
      v_.add(path_ + ": expected an object");
      return;
    }
    obj_ = &doc;
  }

  template <typename T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    try {
      field = (*obj_)[key].get<T>();
    } catch (const json::exception& e) {
      v_.add(path_ + "." + key + ": " + e.what());
    }
  }

  template <typename F>
  void get_with(const char* key, F&& parse) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    try {
      parse((*obj_)[key]);
    } catch (const std::exception& e) {
      v_.add(path_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return nullptr;
    return &(*obj_)[key];
  }

  void reject_unknown() {
    if (!obj_) return;
    for (const auto& [k, _] : obj_->items())
      if (!seen_.count(k)) v_.add(path_ + ": unknown key '" + k + "'");
  }

 private:
  std::string path_;
  Violations& v_;
  const json* obj_ = nullptr;
  std::set<std::string> seen_;
};

const json kNull;

}  // namespace

RunConfig default_config() {
  RunConfig cfg;
  cfg.network.input_dim = 8;
  cfg.network.hidden_dims = {32};
  cfg.network.num_classes = 3;
  cfg.network.normalization = {Normalization::batch_stat};
  cfg.source.train_size = 600;
  cfg.source.heldout_size = 2000;
  return cfg;
}

void RunConfig::validate() const {
  Violations v;
  try {
    network.validate();
  } catch (const ValidationError& e) {
    v.add(e.what());
  }
  if (source.generator == SourceDataset::Generator::gaussian_blobs) {
    if (network.input_dim != source.input_dim)
      v.add("network.input_dim must equal source.input_dim");
    if (network.num_classes != source.num_classes)
      v.add("network.num_classes must equal source.num_classes");
    if (source.num_classes < 2) v.add("source.num_classes must be >= 2");
  } else if (source.csv_path.empty()) {
    v.add("source.csv_path is required for the csv generator");
  }
  if (source.train_size < 1) v.add("source.train_size must be >= 1");
  if (source.heldout_size < 1) v.add("source.heldout_size must be >= 1");
  if (pretrain.epochs < 0) v.add("pretrain.epochs must be >= 0");
  if (!(pretrain.learning_rate > 0.0)) v.add("pretrain.learning_rate must be > 0");
  if (pretrain.batch_size < 2) v.add("pretrain.batch_size must be >= 2");
  if (schedule.corruptions.empty()) v.add("schedule.corruptions must be non-empty");
  if (schedule.batch_size < 2) v.add("schedule.batch_size must be >= 2");
  if (schedule.batches_per_domain < 1) v.add("schedule.batches_per_domain must be >= 1");
  if (schedule.mode == ScheduleMode::rounds && schedule.rounds < 1)
    v.add("schedule.rounds must be >= 1");
  try {
    adapter.validate();
  } catch (const ValidationError& e) {
    v.add(e.what());
  }
  if (methods.empty()) v.add("at least one method is required");
  if (seeds.empty()) v.add("at least one seed is required");
  std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) v.add("seeds must be distinct");
  if (output_dir.empty()) {
    v.add("output_dir must be set");
  } else {
    std::error_code ec;
    std::filesystem::create_directories(output_dir, ec);
    if (ec) v.add("output_dir '" + output_dir + "' is not writable: " + ec.message());
  }
  v.throw_if_any("invalid run config");
}

RunConfig config_from_json(const json& doc) {
  RunConfig cfg = default_config();
  Violations v;
  Section root(doc, "config", v);

  {
    Section s(root.child("network") ? *root.child("network") : kNull, "network", v);
    s.get("input_dim", cfg.network.input_dim);
    s.get("hidden_dims", cfg.network.hidden_dims);
    s.get("num_classes", cfg.network.num_classes);
    s.get("bias", cfg.network.bias);
    s.get_with("activation", [&](const json& j) {
      const auto a = j.get<std::string>();
      if (a == "relu") cfg.network.activation = Activation::relu;
      else if (a == "tanh") cfg.network.activation = Activation::tanh;
      else throw ValidationError("expected relu or tanh, got '" + a + "'");
    });
    s.get_with("normalization", [&](const json& j) {
      auto parse_one = [](const std::string& n) {
        if (n == "none") return Normalization::none;
        if (n == "batch-stat") return Normalization::batch_stat;
        throw ValidationError("expected none or batch-stat, got '" + n + "'");
      };
      cfg.network.normalization.clear();
      if (j.is_string()) {
        cfg.network.normalization.assign(cfg.network.hidden_dims.size(),
                                         parse_one(j.get<std::string>()));
      } else {
        for (const auto& e : j) cfg.network.normalization.push_back(parse_one(e.get<std::string>()));
      }
    });
    s.reject_unknown();
  }
  if (!cfg.network.normalization.empty() &&
      cfg.network.normalization.size() != cfg.network.hidden_dims.size() &&
      std::all_of(cfg.network.normalization.begin(), cfg.network.normalization.end(),
                  [&](Normalization n) { return n == cfg.network.normalization.front(); }))
    cfg.network.normalization.assign(cfg.network.hidden_dims.size(),
                                     cfg.network.normalization.front());

  {
    Section s(root.child("source") ? *root.child("source") : kNull, "source", v);
    s.get_with("generator", [&](const json& j) {
      const auto g = j.get<std::string>();
      if (g == "gaussian_blobs") cfg.source.generator = SourceDataset::Generator::gaussian_blobs;
      else if (g == "csv") cfg.source.generator = SourceDataset::Generator::csv;
      else throw ValidationError("expected gaussian_blobs or csv, got '" + g + "'");
    });
    s.get("num_classes", cfg.source.num_classes);
    s.get("input_dim", cfg.source.input_dim);
    s.get("class_separation", cfg.source.class_separation);
    s.get("csv_path", cfg.source.csv_path);
    s.get("label_column", cfg.source.label_column);
    s.get("train_size", cfg.source.train_size);
    s.get("heldout_size", cfg.source.heldout_size);
    s.get("seed", cfg.source.seed);
    s.reject_unknown();
  }
  {
    Section s(root.child("pretrain") ? *root.child("pretrain") : kNull, "pretrain", v);
    s.get("epochs", cfg.pretrain.epochs);
    s.get("learning_rate", cfg.pretrain.learning_rate);
    s.get("batch_size", cfg.pretrain.batch_size);
    s.reject_unknown();
  }
  {
    Section s(root.child("schedule") ? *root.child("schedule") : kNull, "schedule", v);
    s.get_with("mode", [&](const json& j) { cfg.schedule.mode = parse_schedule_mode(j.get<std::string>()); });
    s.get_with("corruptions", [&](const json& j) {
      cfg.schedule.corruptions.clear();
      for (const auto& e : j) cfg.schedule.corruptions.push_back(parse_corruption(e.get<std::string>()));
    });
    s.get("batches_per_domain", cfg.schedule.batches_per_domain);
    s.get("batch_size", cfg.schedule.batch_size);
    s.get("rounds", cfg.schedule.rounds);
    s.get("shuffle_seed", cfg.schedule.shuffle_seed);
    s.reject_unknown();
  }
  {
    Section s(root.child("adapter") ? *root.child("adapter") : kNull, "adapter", v);
    AdapterConfig& a = cfg.adapter;
    s.get("lambda", a.lambda);
    s.get("xi", a.xi);
    s.get("delta", a.delta);
    s.get("learning_rate", a.learning_rate);
    s.get("num_augs", a.num_augs);
    s.get("aug_noise_scale", a.aug_noise_scale);
    s.get("enable_sd", a.enable_sd);
    s.get("enable_sema", a.enable_sema);
    s.get("invert_mask", a.invert_mask);
    s.get_with("label_rule", [&](const json& j) { a.label_rule = parse_label_rule(j.get<std::string>()); });
    s.get_with("mask_scope", [&](const json& j) {
      const auto m = j.get<std::string>();
      if (m == "global") a.mask_scope = QuantileScope::global;
      else if (m == "per-layer") a.mask_scope = QuantileScope::per_layer;
      else throw ValidationError("expected global or per-layer, got '" + m + "'");
    });
    s.get_with("student_fisher_at", [&](const json& j) {
      const auto m = j.get<std::string>();
      if (m == "current") a.student_fisher_at = StudentFisherAt::current_student;
      else if (m == "previous") a.student_fisher_at = StudentFisherAt::previous_student;
      else throw ValidationError("expected current or previous, got '" + m + "'");
    });
    s.get_with("anchor", [&](const json& j) {
      const auto m = j.get<std::string>();
      if (m == "previous") a.anchor = AnchorMode::previous_step;
      else if (m == "source") a.anchor = AnchorMode::source;
      else throw ValidationError("expected previous or source, got '" + m + "'");
    });
    s.get_with("forward_mode", [&](const json& j) { a.mode = parse_mode(j.get<std::string>()); });
    s.reject_unknown();
  }
  root.get_with("methods", [&](const json& j) {
    cfg.methods.clear();
    for (const auto& e : j) cfg.methods.push_back(parse_method(e.get<std::string>()));
  });
  root.get("seeds", cfg.seeds);
  root.get("output_dir", cfg.output_dir);
  root.get("fisher_snapshots", cfg.fisher_snapshots);
  root.reject_unknown();

  v.throw_if_any("invalid config file");
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path);
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return config_from_json(doc);
}

json to_json(const RunConfig& cfg) {
  json j;
  std::vector<std::string> norms;
  for (std::size_t l = 0; l < cfg.network.hidden_dims.size(); ++l)
    norms.push_back(cfg.network.norm_at(l) == Normalization::batch_stat ? "batch-stat" : "none");
  j["network"] = {{"input_dim", cfg.network.input_dim},
                  {"hidden_dims", cfg.network.hidden_dims},
                  {"num_classes", cfg.network.num_classes},
                  {"normalization", norms},
                  {"activation", cfg.network.activation == Activation::relu ? "relu" : "tanh"},
                  {"bias", cfg.network.bias}};
  j["source"] = {
      {"generator", cfg.source.generator == SourceDataset::Generator::gaussian_blobs
                        ? "gaussian_blobs"
                        : "csv"},
      {"num_classes", cfg.source.num_classes},
      {"input_dim", cfg.source.input_dim},
      {"class_separation", cfg.source.class_separation},
      {"csv_path", cfg.source.csv_path},
      {"label_column", cfg.source.label_column},
      {"train_size", cfg.source.train_size},
      {"heldout_size", cfg.source.heldout_size},
      {"seed", cfg.source.seed}};
  j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                   {"learning_rate", cfg.pretrain.learning_rate},
                   {"batch_size", cfg.pretrain.batch_size}};
  std::vector<std::string> kinds;
  for (auto k : cfg.schedule.corruptions) kinds.push_back(to_string(k));
  j["schedule"] = {{"mode", to_string(cfg.schedule.mode)},
                   {"corruptions", kinds},
                   {"batches_per_domain", cfg.schedule.batches_per_domain},
                   {"batch_size", cfg.schedule.batch_size},
                   {"rounds", cfg.schedule.rounds},
                   {"shuffle_seed", cfg.schedule.shuffle_seed}};
  const AdapterConfig& a = cfg.adapter;
  j["adapter"] = {
      {"lambda", a.lambda},
      {"xi", a.xi},
      {"delta", a.delta},
      {"learning_rate", a.learning_rate},
      {"num_augs", a.num_augs},
      {"aug_noise_scale", a.aug_noise_scale},
      {"enable_sd", a.enable_sd},
      {"enable_sema", a.enable_sema},
      {"invert_mask", a.invert_mask},
      {"label_rule", label_rule_name(a.label_rule)},
      {"mask_scope", a.mask_scope == QuantileScope::global ? "global" : "per-layer"},
      {"student_fisher_at",
       a.student_fisher_at == StudentFisherAt::current_student ? "current" : "previous"},
      {"anchor", a.anchor == AnchorMode::previous_step ? "previous" : "source"},
      {"forward_mode", mode_name(a.mode)}};
  std::vector<std::string> methods;
  for (auto m : cfg.methods) methods.push_back(to_string(m));
  j["methods"] = methods;
  j["seeds"] = cfg.seeds;
  j["output_dir"] = cfg.output_dir;
  j["fisher_snapshots"] = cfg.fisher_snapshots;
  return j;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(text)) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("invalid seed '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("seed list is empty");
  return out;
}

std::vector<Method> parse_method_list(const std::string& text) {
  std::vector<Method> out;
  for (const auto& item : split_list(text)) out.push_back(parse_method(item));
  if (out.empty()) throw ValidationError("method list is empty");
  return out;
}

std::vector<double> parse_value_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("invalid value '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("value list is empty");
  return out;
}

}  // namespace psmt::harness

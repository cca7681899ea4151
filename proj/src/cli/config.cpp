#include "dlcl/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>

#include "json.hpp"

#include "dlcl/error.hpp"

namespace dlcl::cli {

namespace {

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_FIELD(name, member)                                                      \
  Field {                                                                             \
    name, [](RunConfig& c, const std::string& v) { c.member = to_size(name, v); },    \
        [](const RunConfig& c) { return std::to_string(c.member); }                   \
  }
#define REAL_FIELD(name, member)                                                      \
  Field {                                                                             \
    name, [](RunConfig& c, const std::string& v) { c.member = to_double(name, v); },  \
        [](const RunConfig& c) { return fmt(c.member); }                              \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"norm", [](RunConfig& c, const std::string& v) { c.model.norm = model::parse_norm(v); },
       [](const RunConfig& c) { return model::to_string(c.model.norm); }},
      {"aggregation",
       [](RunConfig& c, const std::string& v) { c.model.aggregation = model::parse_aggregation(v); },
       [](const RunConfig& c) { return model::to_string(c.model.aggregation); }},
      SIZE_FIELD("encoder_depth", model.encoder_depth),
      SIZE_FIELD("decoder_depth", model.decoder_depth),
      SIZE_FIELD("d_model", model.d_model),
      SIZE_FIELD("d_ff", model.d_ff),
      SIZE_FIELD("heads", model.heads),
      {"vocab",
       [](RunConfig& c, const std::string& v) {
         c.task.vocab_size = c.model.src_vocab = c.model.tgt_vocab = to_size("vocab", v);
       },
       [](const RunConfig& c) { return std::to_string(c.task.vocab_size); }},
      REAL_FIELD("residual_dropout", model.residual_dropout),
      REAL_FIELD("attention_dropout", model.attention_dropout),
      REAL_FIELD("ffn_dropout", model.ffn_dropout),
      REAL_FIELD("lr_max", scheduler.lr_max),
      REAL_FIELD("lr_init", scheduler.lr_init),
      SIZE_FIELD("warmup", scheduler.warmup),
      SIZE_FIELD("steps", train.steps),
      SIZE_FIELD("accumulation", train.accumulation),
      SIZE_FIELD("batch_tokens", train.batch_tokens),
      SIZE_FIELD("checkpoint_every", train.checkpoint_every),
      SIZE_FIELD("eval_every", train.eval_every),
      SIZE_FIELD("eval_batch_tokens", train.eval_batch_tokens),
      REAL_FIELD("smoothing", train.smoothing),
      {"target_accuracy",
       [](RunConfig& c, const std::string& v) {
         if (v == "none") {
           c.train.target_accuracy.reset();
         } else {
           c.train.target_accuracy = to_double("target_accuracy", v);
         }
       },
       [](const RunConfig& c) {
         return c.train.target_accuracy ? fmt(*c.train.target_accuracy) : std::string("none");
       }},
      {"task", [](RunConfig& c, const std::string& v) { c.task.kind = train::parse_task(v); },
       [](const RunConfig& c) { return train::to_string(c.task.kind); }},
      SIZE_FIELD("min_len", task.min_len),
      SIZE_FIELD("max_len", task.max_len),
      {"seed",
       [](RunConfig& c, const std::string& v) { c.seed = to_size("seed", v); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      SIZE_FIELD("beam_size", beam.beam_size),
      REAL_FIELD("alpha", beam.alpha),
      SIZE_FIELD("decode_max_len", beam.max_len),
      {"out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
       [](const RunConfig& c) { return c.out_dir.string(); }},
      REAL_FIELD("schedule_scale", schedule_scale),
  };
  return table;
}

#undef SIZE_FIELD
#undef REAL_FIELD

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// Desk runs cover 2000 updates of the 50k-update deep schedule.
constexpr double kDeskScale = 2000.0 / 50000.0;

KeyValues scaled(KeyValues kv, double reference_warmup) {
  kv["warmup"] = std::to_string(static_cast<std::size_t>(std::lround(reference_warmup * kDeskScale)));
  kv["schedule_scale"] = fmt(kDeskScale);
  return kv;
}

const std::map<std::string, KeyValues>& presets() {
  static const std::map<std::string, KeyValues> table = [] {
    std::map<std::string, KeyValues> t;
    const KeyValues base = {{"steps", "4000"}, {"batch_tokens", "256"}, {"accumulation", "1"},
                            {"aggregation", "standard"}, {"encoder_depth", "6"}};
    KeyValues deep = {{"steps", "2000"}, {"batch_tokens", "256"}, {"accumulation", "2"},
                      {"lr_max", "0.002"}};
    auto with = [](KeyValues kv, const KeyValues& extra) {
      for (const auto& [k, v] : extra) kv[k] = v;
      return kv;
    };
    t["base-postnorm-6L"] = scaled(with(base, {{"norm", "post"}, {"lr_max", "0.0007"}}), 4000);
    t["base-prenorm-6L"] = scaled(with(base, {{"norm", "pre"}, {"lr_max", "0.001"}}), 8000);
    for (std::size_t depth : {20, 30}) {
      const std::string d = std::to_string(depth);
      for (const char* norm : {"post", "pre"}) {
        const std::string n = norm;
        t["deep-" + n + "norm-" + d + "L"] =
            scaled(with(deep, {{"norm", n}, {"encoder_depth", d}, {"aggregation", "standard"}}), 16000);
        t["dlcl-" + n + "norm-" + d + "L"] =
            scaled(with(deep, {{"norm", n}, {"encoder_depth", d}, {"aggregation", "dlcl"}}), 16000);
      }
    }
    return t;
  }();
  return table;
}

std::string json_value_text(const std::string& key, const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number_float()) return fmt(v.get<double>());
  if (v.is_null() && key == "target_accuracy") return "none";
  throw ConfigError("config key '" + key + "' must be a number or a string, got " +
                    std::string(v.type_name()));
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& [name, kv] : presets()) out.push_back(name);
  return out;
}

const KeyValues& preset(const std::string& name) {
  auto it = presets().find(name);
  if (it == presets().end()) {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config file '" + path.string() + "' must hold a JSON object");
  KeyValues kv;
  for (const auto& [key, value] : doc.items()) {
    field(key);
    kv[key] = json_value_text(key, value);
  }
  return kv;
}

KeyValues merge_layers(const ConfigLayers& layers) {
  KeyValues merged;
  auto apply = [&](const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
      field(k);
      merged[k] = v;
    }
  };
  if (layers.preset) apply(preset(*layers.preset));
  if (layers.file) apply(read_config_file(*layers.file));
  if (layers.env_seed) merged["seed"] = *layers.env_seed;
  apply(layers.flags);
  return merged;
}

RunConfig build_config(const KeyValues& values) {
  RunConfig c;
  if (auto it = values.find("norm"); it != values.end()) field("norm").set(c, it->second);
  model::apply_default_dropout(c.model);
  for (const auto& [k, v] : values) {
    if (k != "norm") field(k).set(c, v);
  }
  c.task.seed = c.seed;
  c.train.seed = c.seed;
  c.train.checkpoint_dir = c.out_dir / "checkpoints";
  c.train.metrics_path = c.out_dir / "metrics.csv";
  c.validate();
  return c;
}

RunConfig resolve_config(const ConfigLayers& layers) { return build_config(merge_layers(layers)); }

void RunConfig::validate() const {
  model.validate();
  scheduler.validate();
  train.validate();
  task.validate();
  beam.validate();
  if (task.vocab_size != model.src_vocab || task.vocab_size != model.tgt_vocab) {
    throw ConfigError("task and model vocabularies differ");
  }
}

std::string describe(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace dlcl::cli

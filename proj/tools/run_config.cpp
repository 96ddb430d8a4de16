#include "run_config.hpp"

#include <fstream>
#include <sstream>

namespace dverge::cli {

namespace {

const char* kDefaults = R"({
  "seed": 0,
  "workers": 1,
  "precision": "float32",
  "checkpoint": "",
  "data": {
    "source": "synthetic",
    "classes": 10,
    "per_class": 200,
    "test_per_class": 50,
    "size": 16,
    "channels": 1,
    "noise": 0.2,
    "jitter": 1,
    "amplitude": 0.3,
    "background": 0.35,
    "seed": 1,
    "train_images": "",
    "train_labels": "",
    "test_images": "",
    "test_labels": ""
  },
  "model": {"arch": "cnn-small", "width": 1, "activation": "relu", "seed": 7},
  "train": {
    "mode": "dverge",
    "n": 3,
    "epochs": 30,
    "pretrain_epochs": 20,
    "batch_size": 64,
    "batches_per_epoch": 0,
    "lr": 0.01,
    "pretrain_lr": 0.05,
    "lr_decay": 0.1,
    "decay_epochs": [],
    "momentum": 0.9,
    "weight_decay": 0.0001,
    "lambda": 1.0,
    "layer": "uniform",
    "frozen": [],
    "probe": {
      "enabled": false,
      "samples": 200,
      "diversity_samples": 200,
      "epsilon": 0.03,
      "steps": 20,
      "step_size": null,
      "rolling_window": 5
    }
  },
  "distill": {
    "epsilon": 0.03,
    "steps": 10,
    "step_size": null,
    "momentum": 1.0,
    "layer": 1,
    "best_iterate": true,
    "member": 0,
    "count": 64
  },
  "advt": {
    "epsilon": 0.03137254901960784,
    "steps": 10,
    "step_size": 0.00784313725490196,
    "momentum": 1.0,
    "restarts": 1,
    "loss": "ce",
    "start_at_zero": false
  },
  "attack": {
    "epsilon": 0.03,
    "steps": 50,
    "step_size": null,
    "momentum": 1.0,
    "restarts": 1,
    "loss": "ce",
    "start_at_zero": true
  },
  "eval": {
    "samples": 200,
    "eps": [0.0, 0.01, 0.02, 0.03],
    "step_ratio": 0.2,
    "iterations": [0, 50, 100],
    "surrogates": [],
    "battery": {
      "entries": [{"loss": "ce", "restarts": 3}, {"loss": "cw", "restarts": 1}],
      "steps": 100,
      "step_ratio": 0.2,
      "momentum": 1.0
    },
    "grid": {"index": 0, "resolution": 21, "eps_max": 0.1, "pgd_direction": false}
  },
  "diversity": {"samples": 200, "layer": "uniform"}
})";

std::string type_name(const Json& j) {
    if (j.is_null()) return "null";
    if (j.is_boolean()) return "boolean";
    if (j.is_number()) return "number";
    if (j.is_string()) return "string";
    if (j.is_array()) return "array";
    return "object";
}

// Keys of `user` must exist in `schema`; objects must stay objects.
void check_keys(const Json& user, const Json& schema, const std::string& path) {
    if (!user.is_object()) throw ConfigError(path.empty() ? "/" : path, "expected an object");
    for (const auto& [key, value] : user.items()) {
        const std::string here = path + "/" + key;
        if (!schema.contains(key)) throw ConfigError(here, "unknown key");
        const Json& s = schema.at(key);
        if (s.is_object()) check_keys(value, s, here);
    }
}

// Derived defaults: a null step size follows its epsilon.
void fill_step(Json& root, const std::string& section, double ratio) {
    Json& s = root.at(Json::json_pointer(section));
    if (s.at("step_size").is_null()) {
        const Json& eps = s.at("epsilon");
        if (!eps.is_number()) throw ConfigError(section + "/epsilon", "expected a number");
        s["step_size"] = eps.get<double>() * ratio;
    }
}

}  // namespace

Json default_config() { return Json::parse(kDefaults); }

Json parse_flag_value(const Json& defaults_at, const std::string& text) {
    std::string body = text;
    if (defaults_at.is_array() && (body.empty() || body.front() != '[')) body = "[" + body + "]";
    try {
        return Json::parse(body);
    } catch (const Json::parse_error&) {
        return Json(text);
    }
}

Json resolve_config(const std::string& config_path, const std::vector<Override>& overrides) {
    const Json defaults = default_config();
    Json cfg = defaults;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("", "cannot read config file " + config_path);
        Json user;
        try {
            user = Json::parse(in);
        } catch (const Json::parse_error& e) {
            throw ConfigError("", "config file " + config_path + " is not valid JSON: " + e.what());
        }
        check_keys(user, defaults, "");
        cfg.merge_patch(user);
        // merge_patch drops keys set to null; restore nullable defaults
        for (const char* p : {"/train/probe/step_size", "/distill/step_size", "/attack/step_size"}) {
            const Json::json_pointer ptr(p);
            if (!cfg.contains(ptr)) cfg[ptr] = nullptr;
        }
    }
    for (const auto& o : overrides) {
        Json::json_pointer ptr;
        try {
            ptr = Json::json_pointer(o.pointer);
        } catch (const Json::parse_error&) {
            throw ConfigError(o.pointer, "malformed key path");
        }
        if (!defaults.contains(ptr)) throw ConfigError(o.pointer, "unknown key");
        const Json& d = defaults.at(ptr);
        if (d.is_object()) throw ConfigError(o.pointer, "cannot override a whole section");
        cfg[ptr] = parse_flag_value(d, o.value);
    }
    fill_step(cfg, "/train/probe", 0.2);
    fill_step(cfg, "/distill", 0.1);
    fill_step(cfg, "/attack", 0.2);
    return cfg;
}

const Json& Reader::at(const std::string& pointer) const {
    const Json::json_pointer ptr(pointer);
    if (!root_.contains(ptr)) throw ConfigError(pointer, "missing");
    return root_.at(ptr);
}

double Reader::number(const std::string& pointer) const {
    const Json& j = at(pointer);
    if (!j.is_number()) throw ConfigError(pointer, "expected a number, got " + type_name(j));
    return j.get<double>();
}

double Reader::positive(const std::string& pointer) const {
    const double v = number(pointer);
    if (!(v > 0)) throw ConfigError(pointer, "must be > 0");
    return v;
}

double Reader::non_negative(const std::string& pointer) const {
    const double v = number(pointer);
    if (!(v >= 0)) throw ConfigError(pointer, "must be >= 0");
    return v;
}

double Reader::in_range(const std::string& pointer, double lo, double hi) const {
    const double v = number(pointer);
    if (!(v >= lo && v <= hi)) {
        std::ostringstream msg;
        msg << "must be in [" << lo << ", " << hi << "]";
        throw ConfigError(pointer, msg.str());
    }
    return v;
}

std::uint64_t Reader::uint(const std::string& pointer) const {
    const Json& j = at(pointer);
    if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0)) {
        throw ConfigError(pointer, "expected a non-negative integer, got " + type_name(j));
    }
    return j.get<std::uint64_t>();
}

std::size_t Reader::count(const std::string& pointer, std::size_t min) const {
    const std::uint64_t v = uint(pointer);
    if (v < min) throw ConfigError(pointer, "must be >= " + std::to_string(min));
    return static_cast<std::size_t>(v);
}

bool Reader::flag(const std::string& pointer) const {
    const Json& j = at(pointer);
    if (!j.is_boolean()) throw ConfigError(pointer, "expected a boolean, got " + type_name(j));
    return j.get<bool>();
}

std::string Reader::string(const std::string& pointer) const {
    const Json& j = at(pointer);
    if (!j.is_string()) throw ConfigError(pointer, "expected a string, got " + type_name(j));
    return j.get<std::string>();
}

std::string Reader::choice(const std::string& pointer, const std::vector<std::string>& options) const {
    const std::string v = string(pointer);
    for (const auto& o : options) {
        if (o == v) return v;
    }
    std::string all;
    for (const auto& o : options) all += (all.empty() ? "" : ", ") + o;
    throw ConfigError(pointer, "must be one of " + all);
}

std::vector<double> Reader::numbers(const std::string& pointer) const {
    const Json& j = at(pointer);
    if (!j.is_array()) throw ConfigError(pointer, "expected an array, got " + type_name(j));
    std::vector<double> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number(pointer + "/" + std::to_string(i)));
    return out;
}

std::vector<std::size_t> Reader::counts(const std::string& pointer) const {
    const Json& j = at(pointer);
    if (!j.is_array()) throw ConfigError(pointer, "expected an array, got " + type_name(j));
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(count(pointer + "/" + std::to_string(i)));
    return out;
}

std::vector<std::string> Reader::strings(const std::string& pointer) const {
    const Json& j = at(pointer);
    if (!j.is_array()) throw ConfigError(pointer, "expected an array, got " + type_name(j));
    std::vector<std::string> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(string(pointer + "/" + std::to_string(i)));
    return out;
}

}  // namespace dverge::cli

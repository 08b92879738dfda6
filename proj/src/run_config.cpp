#include "ccmr/run_config.hpp"

#include <fstream>
#include <initializer_list>

#include <nlohmann/json.hpp>

#include "ccmr/errors.hpp"

namespace ccmr {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void get(const json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

std::string lr_kind_name(LrSchedule::Kind k) {
  switch (k) {
    case LrSchedule::Kind::kConstant:
      return "constant";
    case LrSchedule::Kind::kConstantThenDecay:
      return "constant_then_decay";
    case LrSchedule::Kind::kOneCycle:
    default:
      return "one_cycle";
  }
}

}  // namespace

LossKind parse_loss_kind(const std::string& name) {
  if (name == "l2") return LossKind::kL2;
  if (name == "robust") return LossKind::kRobust;
  throw ConfigError("unknown loss kind '" + name + "' (l2, robust)");
}

LrSchedule::Kind parse_lr_kind(const std::string& name) {
  if (name == "one_cycle") return LrSchedule::Kind::kOneCycle;
  if (name == "constant_then_decay") return LrSchedule::Kind::kConstantThenDecay;
  if (name == "constant") return LrSchedule::Kind::kConstant;
  throw ConfigError("unknown lr schedule '" + name + "' (one_cycle, constant_then_decay, constant)");
}

ToyRunConfig toy_run_from_json(const json& j) {
  ToyRunConfig c;
  try {
    check_keys(j, "config", {"model", "model_seed", "data", "train", "output"});
    if (j.contains("model")) j.at("model").get_to(c.model);
    c.model.validate();
    get(j, "model_seed", c.model_seed);
    if (j.contains("data")) {
      const json& d = j.at("data");
      check_keys(d, "data", {"samples", "size", "seed", "max_displacement"});
      get(d, "samples", c.samples);
      get(d, "size", c.size);
      get(d, "seed", c.data_seed);
      get(d, "max_displacement", c.max_displacement);
    }
    if (c.samples < 1) throw ConfigError("data.samples must be >= 1");
    if (c.size < 16 || c.size % 16 != 0) throw ConfigError("data.size must be a positive multiple of 16");
    TrainConfig& t = c.train;
    int lr_total = 0;
    t.schedule = IterationSchedule::preset("train", c.model.num_scales);
    if (j.contains("train")) {
      const json& tj = j.at("train");
      check_keys(tj, "train", {"steps", "batch_size", "weight_decay", "clip_norm", "eval_every", "seed", "iters", "lr",
                               "loss"});
      get(tj, "steps", t.steps);
      get(tj, "batch_size", t.batch_size);
      get(tj, "weight_decay", t.weight_decay);
      get(tj, "clip_norm", t.clip_norm);
      get(tj, "eval_every", t.eval_every);
      get(tj, "seed", t.seed);
      if (tj.contains("iters")) {
        const auto iters = tj.at("iters").get<std::string>();
        const bool preset = iters == "train" || iters == "sintel" || iters == "kitti";
        t.schedule = preset ? IterationSchedule::preset(iters, c.model.num_scales) : IterationSchedule::parse(iters);
      }
      if (tj.contains("lr")) {
        const json& l = tj.at("lr");
        check_keys(l, "train.lr", {"schedule", "peak", "warmup_fraction", "decay_start", "total_steps"});
        if (l.contains("schedule")) t.lr.kind = parse_lr_kind(l.at("schedule").get<std::string>());
        get(l, "peak", t.lr.peak);
        get(l, "warmup_fraction", t.lr.warmup_fraction);
        get(l, "decay_start", t.lr.decay_start);
        get(l, "total_steps", lr_total);
      }
      if (tj.contains("loss")) {
        const json& l = tj.at("loss");
        check_keys(l, "train.loss", {"kind", "gamma", "epsilon", "exponent"});
        if (l.contains("kind")) t.loss.kind = parse_loss_kind(l.at("kind").get<std::string>());
        get(l, "gamma", t.loss_gamma);
        get(l, "epsilon", t.loss.epsilon);
        get(l, "exponent", t.loss.exponent);
      }
    }
    if (t.schedule.num_scales() != c.model.num_scales) {
      throw ConfigError("train.iters has " + std::to_string(t.schedule.num_scales()) + " entries for a " +
                        std::to_string(c.model.num_scales) + "-scale model");
    }
    if (t.steps < 0 || t.batch_size < 1) throw ConfigError("train.steps must be >= 0 and batch_size >= 1");
    if (!(t.lr.peak > 0.0)) throw ConfigError("train.lr.peak must be positive");
    if (!(t.clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
    // The schedule horizon may exceed `steps` so a run can stop early and resume.
    t.lr.total_steps = lr_total > 0 ? lr_total : t.steps;
    if (t.lr.total_steps < t.steps) throw ConfigError("train.lr.total_steps must be >= train.steps");
    make_loss_weights(1, t.loss_gamma);  // validates gamma
    if (j.contains("output")) {
      const json& o = j.at("output");
      check_keys(o, "output", {"checkpoint", "curve", "checkpoint_every"});
      get(o, "checkpoint", c.checkpoint);
      get(o, "curve", c.curve);
      get(o, "checkpoint_every", c.checkpoint_every);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

json to_json(const ToyRunConfig& c) {
  const TrainConfig& t = c.train;
  return json{
      {"model", c.model},
      {"model_seed", c.model_seed},
      {"data", {{"samples", c.samples}, {"size", c.size}, {"seed", c.data_seed}, {"max_displacement", c.max_displacement}}},
      {"train",
       {{"steps", t.steps},
        {"batch_size", t.batch_size},
        {"weight_decay", t.weight_decay},
        {"clip_norm", t.clip_norm},
        {"eval_every", t.eval_every},
        {"seed", t.seed},
        {"iters", t.schedule.to_string()},
        {"lr",
         {{"schedule", lr_kind_name(t.lr.kind)},
          {"peak", t.lr.peak},
          {"warmup_fraction", t.lr.warmup_fraction},
          {"decay_start", t.lr.decay_start},
          {"total_steps", t.lr.total_steps}}},
        {"loss",
         {{"kind", t.loss.kind == LossKind::kRobust ? "robust" : "l2"},
          {"gamma", t.loss_gamma},
          {"epsilon", t.loss.epsilon},
          {"exponent", t.loss.exponent}}}}},
      {"output", {{"checkpoint", c.checkpoint}, {"curve", c.curve}, {"checkpoint_every", c.checkpoint_every}}}};
}

ToyRunConfig load_toy_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return toy_run_from_json(j);
}

}  // namespace ccmr

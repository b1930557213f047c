// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/trainer.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "desam/binary_io.hpp"
#include "desam/error.hpp"

namespace desam {

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw FormatError("config key '" + key + "': '" + v + "' is not a number");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw FormatError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

std::string join_sizes(const std::vector<std::size_t>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v, char sep) {
  std::vector<std::size_t> out;
  for (const auto& part : io::split(v, sep)) out.push_back(parse_size(key, io::trim(part)));
  return out;
}

// Ordered key/value lines, `#` comments and blank lines skipped.
std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text,
                                                          const char* what) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = io::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw FormatError(std::string(what) + " line " + std::to_string(lineno) +
                        ": expected 'key = value'");
    }
    std::string key = io::trim(std::string_view(t).substr(0, eq));
    std::string value = io::trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) {
      throw FormatError(std::string(what) + " line " + std::to_string(lineno) + ": empty key");
    }
    if (!seen.insert(key).second) {
      throw FormatError(std::string(what) + ": key '" + key + "' given twice");
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::string lr_decay_name(LrDecay d) { return d == LrDecay::poly ? "poly" : "constant"; }

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be positive");
  }
  if (batch_size == 0) throw ValidationError("batch_size must be positive");
  if (epochs == 0) throw ValidationError("epochs must be positive");
  weights.validate();
  if (!(lr_power > 0.0)) throw ValidationError("lr_power must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ValidationError("adam betas must lie in [0,1)");
  }
  if (!(adam_eps > 0.0)) throw ValidationError("adam_eps must be positive");
  if (mode == PromptMode::grid_points && n_pos + n_neg == 0) {
    throw ValidationError("grid_points training needs n_pos + n_neg >= 1");
  }
  if (split.train == 0 || split.val == 0) throw ValidationError("split ratio components must be positive");
  if (model.image_size == 0) throw ValidationError("image_size must be positive");
  model.prim.validate();
  model.pimm.validate();
  if (eval_grid == 0) throw ValidationError("eval_grid must be positive");
  merge.validate();
  if (val_interval == 0) throw ValidationError("val_interval must be positive");
  if (prim_init.empty()) throw ValidationError("prim_init must be 'random' or a checkpoint path");
  if (!encoder.empty()) EncoderSpec::parse(encoder);
}

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  auto kv = [&](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
  kv("mode", to_string(mode));
  kv("learning_rate", fmt_double(learning_rate));
  kv("batch_size", std::to_string(batch_size));
  kv("epochs", std::to_string(epochs));
  kv("lambda1", fmt_double(weights.lambda1));
  kv("lambda2", fmt_double(weights.lambda2));
  kv("lambda3", fmt_double(weights.lambda3));
  kv("seed", std::to_string(seed));
  kv("lr_decay", lr_decay_name(lr_decay));
  kv("lr_power", fmt_double(lr_power));
  kv("adam_beta1", fmt_double(adam_beta1));
  kv("adam_beta2", fmt_double(adam_beta2));
  kv("adam_eps", fmt_double(adam_eps));
  kv("n_pos", std::to_string(n_pos));
  kv("n_neg", std::to_string(n_neg));
  kv("split_ratio", std::to_string(split.train) + ":" + std::to_string(split.val));
  kv("encoder", encoder);
  kv("image_size", std::to_string(model.image_size));
  kv("token_dim", std::to_string(model.prim.token_dim));
  kv("prim_layers", std::to_string(model.prim.n_layers));
  kv("prim_heads", std::to_string(model.prim.n_heads));
  kv("mlp_dim", std::to_string(model.prim.mlp_dim));
  kv("iou_head_depth", std::to_string(model.prim.iou_head_depth));
  kv("stage_widths", join_sizes(model.pimm.stage_widths, ','));
  kv("blocks_per_stage", std::to_string(model.pimm.blocks_per_stage));
  kv("se_reduction", std::to_string(model.pimm.se_reduction));
  kv("upsample", to_string(model.pimm.upsample));
  kv("variant", to_string(model.variant));
  kv("prim_init", prim_init);
  kv("eval_grid", std::to_string(eval_grid));
  kv("merge", to_string(merge.kind));
  kv("threshold", fmt_double(merge.threshold));
  kv("val_interval", std::to_string(val_interval));
  return o.str();
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"mode", [&](auto&, auto& v) { c.mode = parse_prompt_mode(v); }},
      {"learning_rate", [&](auto& k, auto& v) { c.learning_rate = parse_double(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.batch_size = parse_size(k, v); }},
      {"epochs", [&](auto& k, auto& v) { c.epochs = parse_size(k, v); }},
      {"lambda1", [&](auto& k, auto& v) { c.weights.lambda1 = parse_double(k, v); }},
      {"lambda2", [&](auto& k, auto& v) { c.weights.lambda2 = parse_double(k, v); }},
      {"lambda3", [&](auto& k, auto& v) { c.weights.lambda3 = parse_double(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = parse_u64(k, v); }},
      {"lr_decay",
       [&](auto&, auto& v) {
         if (v == "poly") c.lr_decay = LrDecay::poly;
         else if (v == "constant") c.lr_decay = LrDecay::constant;
         else throw FormatError("lr_decay must be poly or constant, got '" + v + "'");
       }},
      {"lr_power", [&](auto& k, auto& v) { c.lr_power = parse_double(k, v); }},
      {"adam_beta1", [&](auto& k, auto& v) { c.adam_beta1 = parse_double(k, v); }},
      {"adam_beta2", [&](auto& k, auto& v) { c.adam_beta2 = parse_double(k, v); }},
      {"adam_eps", [&](auto& k, auto& v) { c.adam_eps = parse_double(k, v); }},
      {"n_pos", [&](auto& k, auto& v) { c.n_pos = parse_size(k, v); }},
      {"n_neg", [&](auto& k, auto& v) { c.n_neg = parse_size(k, v); }},
      {"split_ratio",
       [&](auto& k, auto& v) {
         const auto parts = parse_sizes(k, v, ':');
         if (parts.size() != 2) throw FormatError("split_ratio must look like 9:1");
         c.split = {static_cast<unsigned>(parts[0]), static_cast<unsigned>(parts[1])};
       }},
      {"encoder", [&](auto&, auto& v) { c.encoder = v; }},
      {"image_size", [&](auto& k, auto& v) { c.model.image_size = parse_size(k, v); }},
      {"token_dim", [&](auto& k, auto& v) { c.model.prim.token_dim = parse_size(k, v); }},
      {"prim_layers", [&](auto& k, auto& v) { c.model.prim.n_layers = parse_size(k, v); }},
      {"prim_heads", [&](auto& k, auto& v) { c.model.prim.n_heads = parse_size(k, v); }},
      {"mlp_dim", [&](auto& k, auto& v) { c.model.prim.mlp_dim = parse_size(k, v); }},
      {"iou_head_depth", [&](auto& k, auto& v) { c.model.prim.iou_head_depth = parse_size(k, v); }},
      {"stage_widths", [&](auto& k, auto& v) { c.model.pimm.stage_widths = parse_sizes(k, v, ','); }},
      {"blocks_per_stage",
       [&](auto& k, auto& v) { c.model.pimm.blocks_per_stage = parse_size(k, v); }},
      {"se_reduction", [&](auto& k, auto& v) { c.model.pimm.se_reduction = parse_size(k, v); }},
      {"upsample", [&](auto&, auto& v) { c.model.pimm.upsample = parse_upsample_kind(v); }},
      {"variant", [&](auto&, auto& v) { c.model.variant = parse_ablation_variant(v); }},
      {"prim_init", [&](auto&, auto& v) { c.prim_init = v; }},
      {"eval_grid", [&](auto& k, auto& v) { c.eval_grid = parse_size(k, v); }},
      {"merge", [&](auto&, auto& v) { c.merge.kind = parse_merge_kind(v); }},
      {"threshold", [&](auto& k, auto& v) { c.merge.threshold = parse_double(k, v); }},
      {"val_interval", [&](auto& k, auto& v) { c.val_interval = parse_size(k, v); }},
  };
  for (const auto& [key, value] : parse_kv(text, "config")) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw FormatError("unknown config key '" + key + "'");
    it->second(key, value);
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  return parse(io::read_text(path));
}

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
  if (config.lr_decay == LrDecay::constant) return config.learning_rate;
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return config.learning_rate * std::pow(1.0 - frac, config.lr_power);
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> Checkpoint::serialize() const {
  io::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.str(config.to_text());

  std::ostringstream meta;
  meta << "encoder = " << model.encoder.to_string() << '\n';
  meta << "source_site = " << source_site << '\n';
  meta << "epoch = " << epoch << '\n';
  meta << "val_dice_history = ";
  for (std::size_t i = 0; i < val_dice_history.size(); ++i) {
    meta << (i ? "," : "") << fmt_double(val_dice_history[i]);
  }
  meta << '\n' << "cache_hash = " << cache_hash << '\n';
  w.str(meta.str());

  std::uint32_t count = 0;
  model.for_each([&](const std::string&, const Tensor&, bool) { ++count; });
  w.u32(count);
  model.for_each([&](const std::string& name, const Tensor& t, bool) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    io::ByteWriter payload;
    for (double v : t.data()) payload.f32(static_cast<float>(v));
    const auto bytes = payload.take();
    w.raw(bytes);
    w.u32(io::crc32(bytes));
  });
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  const auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config = TrainConfig::parse(r.str());

  EncoderSpec encoder;
  bool have_encoder = false;
  for (const auto& [key, value] : parse_kv(r.str(), "checkpoint meta")) {
    if (key == "encoder") {
      encoder = EncoderSpec::parse(value);
      have_encoder = true;
    } else if (key == "source_site") {
      ck.source_site = value;
    } else if (key == "epoch") {
      ck.epoch = parse_size(key, value);
    } else if (key == "val_dice_history") {
      if (!value.empty()) {
        for (const auto& part : io::split(value, ',')) {
          ck.val_dice_history.push_back(parse_double(key, io::trim(part)));
        }
      }
    } else if (key == "cache_hash") {
      ck.cache_hash = parse_u64(key, value);
    } else {
      throw FormatError("unknown checkpoint meta key '" + key + "'");
    }
  }
  if (!have_encoder) throw FormatError("checkpoint meta lacks the encoder spec");

  ck.model = DesamModel::create(ck.config.model, encoder, ck.config.seed);
  std::map<std::string, Tensor*> slots;
  ck.model.for_each([&](const std::string& name, Tensor& t, bool) { slots[name] = &t; });

  const auto count = r.u32();
  if (count != slots.size()) {
    throw CorruptionError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(slots.size()));
  }
  std::set<std::string> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const auto it = slots.find(name);
    if (it == slots.end()) throw CorruptionError("checkpoint tensor '" + name + "' is not a model parameter");
    if (!loaded.insert(name).second) throw CorruptionError("checkpoint tensor '" + name + "' repeated");
    Tensor& dst = *it->second;
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (shape != dst.shape()) {
      throw CorruptionError("checkpoint tensor '" + name + "' has shape " + shape_string(shape) +
                            ", expected " + shape_string(dst.shape()));
    }
    const auto payload = r.raw(dst.size() * 4);
    if (r.u32() != io::crc32(payload)) {
      throw CorruptionError("checkpoint tensor '" + name + "' failed its checksum");
    }
    io::ByteReader pr(payload);
    for (auto& v : dst.data()) v = static_cast<double>(pr.f32());
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after checkpoint tensors");
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, ckpt.serialize());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return Checkpoint::deserialize(io::read_file(path));
}

bool freeze_audit(const Checkpoint& before, const Checkpoint& after) {
  return before.model.prompt == after.model.prompt && before.cache_hash == after.cache_hash;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct TrainSample {
  std::string id;
  EmbeddingTensors emb;
  Mask mask;
  Tensor target;
};

std::vector<TrainSample> load_samples(const std::vector<std::string>& ids, const CacheIndex& cache,
                                      const DatasetManifest& manifest, std::size_t image_size) {
  std::vector<TrainSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    if (!cache.contains(id)) throw NotFoundError("cache miss: no embeddings for sample '" + id + "'");
    TrainSample s;
    s.id = id;
    s.emb = EmbeddingTensors::from(load_embeddings(cache, id));
    s.mask = load_mask(manifest.find(id), image_size);
    s.target = mask_to_tensor(s.mask);
    out.push_back(std::move(s));
  }
  return out;
}

struct Adam {
  std::vector<Tensor*> params;
  std::vector<Tensor> m, v;
  std::size_t t = 0;

  explicit Adam(std::vector<Tensor*> p) : params(std::move(p)) {
    for (auto* x : params) {
      m.push_back(Tensor::zeros_like(*x));
      v.push_back(Tensor::zeros_like(*x));
    }
  }

  void step(const std::vector<Tensor>& grads, double lr, const TrainConfig& c) {
    ++t;
    const double bc1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = grads[i][j];
        m[i][j] = c.adam_beta1 * m[i][j] + (1.0 - c.adam_beta1) * g;
        v[i][j] = c.adam_beta2 * v[i][j] + (1.0 - c.adam_beta2) * g * g;
        p[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + c.adam_eps);
      }
      // Parameters live on the float32 grid so checkpoints round-trip exactly.
      p.round_to_float();
    }
  }
};

std::vector<PromptSet> training_prompts(const TrainConfig& c, const Mask& mask, Rng& rng) {
  if (c.mode == PromptMode::whole_box) return {whole_image_box(mask.width)};
  std::size_t fg = 0;
  for (auto v : mask.data) fg += v;
  std::size_t n_pos = c.n_pos, n_neg = c.n_neg;
  // Slices without foreground (or without background) fall back to the label
  // that exists, keeping the number of prompts per image fixed.
  if (fg == 0) {
    n_neg += n_pos;
    n_pos = 0;
  } else if (fg == mask.size()) {
    n_pos += n_neg;
    n_neg = 0;
  }
  const PromptSet drawn = sample_training_points(mask, n_pos, n_neg, rng);
  std::vector<PromptSet> out;
  for (const auto& pt : drawn.points) {
    PromptSet single;
    single.mode = PromptMode::grid_points;
    single.image_size = drawn.image_size;
    single.points.push_back(pt);
    out.push_back(std::move(single));
  }
  return out;
}

double validation_dice(const DesamModel& model, const TrainConfig& c,
                       const std::vector<TrainSample>& val) {
  double sum = 0.0;
  for (const auto& s : val) {
    sum += dice_score(predict_mask(model, c.mode, s.emb, c.eval_grid, c.merge), s.mask);
  }
  return val.empty() ? 0.0 : sum / static_cast<double>(val.size());
}

}  // namespace

TrainResult train(const TrainConfig& config, const EvalPlan& plan, const CacheIndex& cache,
                  const DatasetManifest& manifest) {
  config.validate();
  if (plan.train_ids.empty()) throw ValidationError("training plan has no training samples");
  if (!config.encoder.empty() && EncoderSpec::parse(config.encoder).to_string() != cache.spec.to_string()) {
    throw ValidationError("cache was built with encoder '" + cache.spec.to_string() +
                          "' but the config expects '" + config.encoder + "'");
  }
  const std::uint64_t hash_before = hash_file(cache.cache_path);

  DesamModel model = DesamModel::create(config.model, cache.spec, config.seed);
  if (config.prim_init != "random") {
    const Checkpoint src = load_checkpoint(config.prim_init);
    std::map<std::string, const Tensor*> from;
    src.model.prim.for_each([&](const std::string& n, const Tensor& t) { from[n] = &t; });
    model.prim.for_each([&](const std::string& n, Tensor& t) {
      const auto it = from.find(n);
      if (it == from.end() || it->second->shape() != t.shape()) {
        throw ValidationError("prim_init checkpoint does not match PRIM parameter '" + n + "'");
      }
      t = *it->second;
    });
  }

  const auto train_set = load_samples(plan.train_ids, cache, manifest, config.model.image_size);
  const auto val_set = load_samples(plan.val_ids, cache, manifest, config.model.image_size);

  std::vector<Tensor*> trainable;
  model.for_each([&](const std::string&, Tensor& t, bool on) {
    if (on) trainable.push_back(&t);
  });
  Adam adam(trainable);

  TrainResult result;
  auto snapshot = [&](std::size_t epoch, const std::vector<double>& history) {
    Checkpoint ck;
    ck.config = config;
    ck.model = model;
    ck.source_site = plan.source_site;
    ck.epoch = epoch;
    ck.val_dice_history = history;
    ck.cache_hash = hash_before;
    return ck;
  };
  result.initial = snapshot(0, {});

  const std::size_t steps_per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const bool supervise_iou = config.mode == PromptMode::grid_points && model.uses_iou_head();

  Rng rng(Rng::mix(config.seed, 0x545241494eull));
  std::vector<std::size_t> order(train_set.size());
  std::vector<double> history;
  double best_dice = -1.0;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + config.batch_size);
      std::vector<const TrainSample*> batch;
      std::vector<std::vector<PromptSet>> prompts;
      std::size_t n_inst = 0;
      for (std::size_t k = b0; k < b1; ++k) {
        batch.push_back(&train_set[order[k]]);
        prompts.push_back(training_prompts(config, batch.back()->mask, rng));
        n_inst += prompts.back().size();
      }

      std::vector<Tensor> grads;
      for (auto* p : trainable) grads.push_back(Tensor::zeros_like(*p));
      const double inv = 1.0 / static_cast<double>(n_inst);
      LossBreakdown logged;
      logged.mode = config.mode;
      if (supervise_iou) logged.mse = 0.0;

      for (std::size_t k = 0; k < batch.size(); ++k) {
        const TrainSample& s = *batch[k];
        for (const auto& ps : prompts[k]) {
          ag::Tape tape;
          const ag::Binder bind(tape, true);
          const auto pe = encode_prompts(ps, model.prompt, model.encoder.grid);
          const auto fw = forward(bind, model, s.emb, pe);
          const ag::Var dice = dice_loss(fw.logits, s.target);
          const ag::Var ce = ce_loss(fw.logits, s.target);
          ag::Var total;
          if (supervise_iou) {
            const double target = iou_target(threshold_logits(fw.logits.value()), s.mask);
            const ag::Var mse = mse_loss(fw.iou, target);
            total = combined_loss(config.mode, dice, ce, mse, config.weights);
            *logged.mse += mse.value()[0] * inv;
          } else if (config.mode == PromptMode::grid_points) {
            total = ag::add(ag::scale(dice, config.weights.lambda1), ag::scale(ce, config.weights.lambda2));
          } else {
            total = combined_loss(config.mode, dice, ce, ag::Var{}, config.weights);
          }
          const double loss = total.value()[0];
          if (!std::isfinite(loss)) {
            throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                  std::to_string(step) + " (sample '" + s.id + "')");
          }
          logged.dice += dice.value()[0] * inv;
          logged.ce += ce.value()[0] * inv;
          logged.total += loss * inv;
          tape.backward(total);
          for (std::size_t i = 0; i < trainable.size(); ++i) {
            if (const Tensor* g = tape.grad_of(*trainable[i])) {
              for (std::size_t j = 0; j < g->size(); ++j) grads[i][j] += (*g)[j] * inv;
            }
          }
        }
      }

      const double lr = lr_schedule(step, total_steps, config);
      adam.step(grads, lr, config);
      for (auto* p : trainable) {
        if (!p->all_finite()) {
          throw DivergenceError("parameters became non-finite at epoch " + std::to_string(epoch) +
                                ", step " + std::to_string(step));
        }
      }
      result.log.push_back({step, epoch, lr, logged});
      ++step;
    }

    if (epoch % config.val_interval == 0 || epoch == config.epochs) {
      const double d = validation_dice(model, config, val_set);
      history.push_back(d);
      if (d > best_dice) {
        best_dice = d;
        result.best = snapshot(epoch, {});
      }
    }
  }
  result.best.val_dice_history = history;
  result.best.cache_hash = hash_file(cache.cache_path);
  return result;
}

}  // namespace desam

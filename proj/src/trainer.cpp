#include "blockdiff/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "blockdiff/checkpoint.hpp"
#include "blockdiff/decoding.hpp"
#include "json.hpp"

namespace blockdiff {

const char* to_string(Objective o) {
  switch (o) {
    case Objective::ar:
      return "ar";
    case Objective::ardllm:
      return "ardllm";
    case Objective::bidllm:
      return "bidllm";
    case Objective::block:
      return "block";
  }
  return "?";
}

Objective objective_from_string(const std::string& s) {
  if (s == "ar") return Objective::ar;
  if (s == "ardllm") return Objective::ardllm;
  if (s == "bidllm") return Objective::bidllm;
  if (s == "block") return Objective::block;
  throw std::invalid_argument("unknown objective '" + s + "' (expected ar, ardllm, bidllm or block)");
}

double LrSchedule::at(long step, long total) const {
  double f = 1.0;
  if (warmup_steps > 0) f *= std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps));
  if (warmdown_steps > 0 && step >= total - warmdown_steps) {
    f *= static_cast<double>(total - step) / static_cast<double>(warmdown_steps);
  }
  return peak * f;
}

void CurriculumStage::validate() const {
  const std::string who = "stage '" + name + "': ";
  if (steps < 1) throw std::invalid_argument(who + "steps must be >= 1");
  if (objective == Objective::block && block_size < 1) throw std::invalid_argument(who + "block size must be >= 1");
  if (!(lr.peak >= 0.0)) throw std::invalid_argument(who + "learning rate must be >= 0");
  if (lr.warmup_steps < 0 || lr.warmdown_steps < 0) throw std::invalid_argument(who + "negative lr ramp");
  if (warmup) {
    if (objective == Objective::ar) throw std::invalid_argument(who + "corruption warmup needs a diffusion objective");
    WarmupConfig w = *warmup;
    w.step = 0;
    w.validate();
  }
}

AttentionMaskSpec CurriculumStage::attention() const {
  switch (objective) {
    case Objective::ar:
    case Objective::ardllm:
      return AttentionMaskSpec::causal();
    case Objective::bidllm:
      return AttentionMaskSpec::bidirectional();
    case Objective::block:
      return AttentionMaskSpec::block_causal(block_size);
  }
  return AttentionMaskSpec::causal();
}

Parametrization CurriculumStage::parametrization() const {
  return objective == Objective::ar ? Parametrization::shifted : Parametrization::unshifted;
}

MaskKind CurriculumStage::decode_attention() const {
  return objective == Objective::bidllm ? MaskKind::bidirectional : MaskKind::block_causal;
}

void TrainRun::validate() const {
  model.validate();
  const Vocabulary vocab(data.max_number);
  if (model.vocab_size != vocab.size()) {
    throw std::invalid_argument("run: model vocab_size " + std::to_string(model.vocab_size) +
                                " does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
  }
  if (model.resolved_mask_id() != vocab.mask()) throw std::invalid_argument("run: mask id mismatch");
  if (stages.empty()) throw std::invalid_argument("run: no stages");
  std::set<std::string> names;
  for (const auto& s : stages) {
    s.validate();
    if (!names.insert(s.name).second) throw std::invalid_argument("run: duplicate stage name '" + s.name + "'");
  }
  if (batch.batch_size < 1) throw std::invalid_argument("run: batch size must be >= 1");
  if (batch.context_len + 1 > model.max_len) {
    throw std::invalid_argument("run: context_len + 1 must not exceed model max_len");
  }
  PackingConfig{batch.context_len, batch.eos_min, batch.eos_max}.validate();
  for (int b : eval.block_sizes) {
    if (b < 1) throw std::invalid_argument("run: eval block sizes must be >= 1");
  }
  if (eval.every < 0) throw std::invalid_argument("run: eval.every must be >= 0");
  if (parity_steps > 0 && total_steps() != parity_steps) {
    throw std::invalid_argument("run: compute parity requires " + std::to_string(parity_steps) +
                                " total steps, stages sum to " + std::to_string(total_steps()));
  }
}

long TrainRun::total_steps() const {
  long n = 0;
  for (const auto& s : stages) n += s.steps;
  return n;
}

TrainRun TrainRun::from_config(const KeyValueConfig& c) {
  TrainRun r;
  r.name = c.get_string("run.name", r.name);
  r.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
  r.log_wall_time = c.get_bool("log.wall_time", false);
  r.parity_steps = c.get_int("compare.total_steps", 0);

  auto& d = r.data;
  d.max_number = static_cast<int>(c.get_int("data.max_number", d.max_number));
  d.arithmetic.lo = static_cast<int>(c.get_int("data.lo", d.arithmetic.lo));
  d.arithmetic.hi = static_cast<int>(c.get_int("data.hi", d.arithmetic.hi));
  d.arithmetic.clauses = static_cast<int>(c.get_int("data.clauses", d.arithmetic.clauses));
  d.train_size = c.get_int("data.train_size", d.train_size);
  d.heldout_size = c.get_int("data.heldout_size", d.heldout_size);
  d.path = c.get_string("data.path", "");

  const Vocabulary vocab(d.max_number);
  auto& m = r.model;
  m.vocab_size = static_cast<int>(c.get_int("model.vocab_size", vocab.size()));
  m.mask_id = static_cast<int>(c.get_int("model.mask_id", vocab.mask()));
  m.d_model = static_cast<int>(c.get_int("model.d_model", m.d_model));
  m.n_layers = static_cast<int>(c.get_int("model.n_layers", m.n_layers));
  m.n_heads = static_cast<int>(c.get_int("model.n_heads", m.n_heads));
  m.d_ff = static_cast<int>(c.get_int("model.d_ff", m.d_ff));
  m.max_len = static_cast<int>(c.get_int("model.max_len", m.max_len));
  m.init_std = c.get_double("model.init_std", m.init_std);

  auto& b = r.batch;
  b.batch_size = static_cast<int>(c.get_int("batch.size", b.batch_size));
  b.context_len = static_cast<int>(c.get_int("batch.context_len", b.context_len));
  b.eos_min = static_cast<int>(c.get_int("batch.eos_min", b.eos_min));
  b.eos_max = static_cast<int>(c.get_int("batch.eos_max", b.eos_max));

  auto& o = r.optim;
  o.beta1 = c.get_double("optim.beta1", o.beta1);
  o.beta2 = c.get_double("optim.beta2", o.beta2);
  o.eps = c.get_double("optim.eps", o.eps);
  o.weight_decay = c.get_double("optim.weight_decay", o.weight_decay);
  o.clip_norm = c.get_double("optim.clip_norm", o.clip_norm);

  r.eval.every = c.get_int("eval.every", 0);
  if (c.has("eval.block_sizes")) {
    r.eval.block_sizes.clear();
    for (const auto& s : c.get_list("eval.block_sizes")) r.eval.block_sizes.push_back(std::stoi(s));
  }

  for (const auto& name : c.get_list("stages")) {
    CurriculumStage s;
    s.name = name;
    const std::string p = "stage." + name + ".";
    s.objective = objective_from_string(c.get_string(p + "objective"));
    s.block_size = static_cast<int>(c.get_int(p + "block_size", s.block_size));
    s.steps = c.get_int(p + "steps");
    s.lr.peak = c.get_double(p + "lr", s.lr.peak);
    s.lr.warmup_steps = c.get_int(p + "lr_warmup", 0);
    s.lr.warmdown_steps = c.get_int(p + "lr_warmdown", 0);
    const long cw = c.get_int(p + "corruption_warmup", 0);
    const double u_init = c.get_double(p + "u_init", 1e-3);
    if (cw > 0) s.warmup = WarmupConfig{u_init, cw, 0};
    r.stages.push_back(s);
  }
  c.finish();
  r.validate();
  return r;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

KeyValueConfig TrainRun::to_config() const {
  KeyValueConfig c;
  auto i = [&](const std::string& k, long v) { c.set(k, std::to_string(v)); };
  auto f = [&](const std::string& k, double v) { c.set(k, fmt_double(v)); };
  i("schema_version", kConfigSchemaVersion);
  c.set("run.name", name);
  c.set("seed", std::to_string(seed));
  c.set("log.wall_time", log_wall_time ? "true" : "false");
  if (parity_steps > 0) i("compare.total_steps", parity_steps);
  i("data.max_number", data.max_number);
  i("data.lo", data.arithmetic.lo);
  i("data.hi", data.arithmetic.hi);
  i("data.clauses", data.arithmetic.clauses);
  i("data.train_size", data.train_size);
  i("data.heldout_size", data.heldout_size);
  if (!data.path.empty()) c.set("data.path", data.path);
  i("model.vocab_size", model.vocab_size);
  i("model.mask_id", model.resolved_mask_id());
  i("model.d_model", model.d_model);
  i("model.n_layers", model.n_layers);
  i("model.n_heads", model.n_heads);
  i("model.d_ff", model.d_ff);
  i("model.max_len", model.max_len);
  f("model.init_std", model.init_std);
  i("batch.size", batch.batch_size);
  i("batch.context_len", batch.context_len);
  i("batch.eos_min", batch.eos_min);
  i("batch.eos_max", batch.eos_max);
  f("optim.beta1", optim.beta1);
  f("optim.beta2", optim.beta2);
  f("optim.eps", optim.eps);
  f("optim.weight_decay", optim.weight_decay);
  f("optim.clip_norm", optim.clip_norm);
  i("eval.every", eval.every);
  std::string bs, names;
  for (int b : eval.block_sizes) bs += (bs.empty() ? "" : ",") + std::to_string(b);
  c.set("eval.block_sizes", bs);
  for (const auto& s : stages) {
    names += (names.empty() ? "" : ",") + s.name;
    const std::string p = "stage." + s.name + ".";
    c.set(p + "objective", to_string(s.objective));
    i(p + "block_size", s.block_size);
    i(p + "steps", s.steps);
    f(p + "lr", s.lr.peak);
    i(p + "lr_warmup", s.lr.warmup_steps);
    i(p + "lr_warmdown", s.lr.warmdown_steps);
    i(p + "corruption_warmup", s.warmup ? s.warmup->steps : 0);
    f(p + "u_init", s.warmup ? s.warmup->u_init : 1e-3);
  }
  c.set("stages", names);
  return c;
}

void check_compute_parity(const std::vector<TrainRun>& runs) {
  for (std::size_t i = 1; i < runs.size(); ++i) {
    if (runs[i].total_steps() != runs[0].total_steps() || runs[i].tokens_per_step() != runs[0].tokens_per_step()) {
      throw std::invalid_argument("compute parity: run '" + runs[i].name + "' uses " +
                                  std::to_string(runs[i].total_steps()) + " steps x " +
                                  std::to_string(runs[i].tokens_per_step()) + " tokens, run '" + runs[0].name +
                                  "' uses " + std::to_string(runs[0].total_steps()) + " x " +
                                  std::to_string(runs[0].tokens_per_step()));
    }
  }
}

std::vector<TokenSeq> read_corpus(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::vector<TokenSeq> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(vocab.tokenize(line));
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, const std::vector<TokenSeq>& corpus, const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus " + path.string());
  for (const auto& s : corpus) out << vocab.detokenize(s) << '\n';
}

Dataset make_dataset(const DataConfig& cfg, std::uint64_t seed) {
  Dataset ds{Vocabulary(cfg.max_number), {}, {}};
  if (cfg.heldout_size < 0 || cfg.train_size < 0) throw std::invalid_argument("data: negative sizes");
  if (!cfg.path.empty()) {
    auto all = read_corpus(cfg.path, ds.vocab);
    if (static_cast<long>(all.size()) <= cfg.heldout_size) {
      throw std::invalid_argument("data: corpus " + cfg.path + " has only " + std::to_string(all.size()) + " lines");
    }
    const auto cut = all.end() - cfg.heldout_size;
    ds.train.assign(all.begin(), cut);
    ds.heldout.assign(cut, all.end());
    return ds;
  }
  ds.train = gen_arithmetic(cfg.arithmetic, ds.vocab, cfg.train_size, mix64(seed ^ 0x7a11));
  std::set<TokenSeq> seen(ds.train.begin(), ds.train.end());
  std::uint64_t round = 0;
  while (static_cast<long>(ds.heldout.size()) < cfg.heldout_size) {
    if (round > 1000) throw std::invalid_argument("data: cannot find enough held-out sequences outside the train set");
    for (auto& s : gen_arithmetic(cfg.arithmetic, ds.vocab, 256, mix64(seed ^ (0x4e1d + round)))) {
      if (static_cast<long>(ds.heldout.size()) == cfg.heldout_size) break;
      if (seen.insert(s).second) ds.heldout.push_back(std::move(s));
    }
    ++round;
  }
  return ds;
}

std::pair<TokenSeq, TokenSeq> answer_split(const TokenSeq& seq, const Vocabulary& vocab) {
  const Token eq = vocab.symbol("=");
  auto it = std::find(seq.rbegin(), seq.rend(), eq);
  if (it == seq.rend()) throw std::invalid_argument("answer_split: sequence has no '='");
  const auto cut = it.base();
  TokenSeq prompt{vocab.bos()};
  prompt.insert(prompt.end(), seq.begin(), cut);
  return {prompt, TokenSeq(cut, seq.end())};
}

ExactMatch exact_match(const Transformer<float>& model, const std::vector<TokenSeq>& heldout,
                       const Vocabulary& vocab, int block_size, MaskKind attention) {
  ExactMatch em;
  em.block_size = block_size;
  for (const auto& seq : heldout) {
    auto [prompt, answer] = answer_split(seq, vocab);
    DecodeConfig dc;
    dc.block_size = block_size;
    dc.steps_per_block = block_size;
    dc.commits_per_step = 1;
    dc.max_new_tokens = static_cast<int>(answer.size());
    dc.attention = attention;
    const TokenSeq out = decode_blockwise(model, prompt, dc);
    ++em.n;
    em.correct += std::equal(answer.begin(), answer.end(), out.begin() + static_cast<long>(prompt.size()));
  }
  return em;
}

std::string MetricsRecord::json() const {
  nlohmann::ordered_json j;
  j["kind"] = "train";
  j["step"] = step;
  j["stage"] = stage;
  j["stage_step"] = stage_step;
  j["objective"] = objective;
  j["loss"] = loss;
  j["ce"] = ce;
  j["grad_norm"] = grad_norm;
  j["lr"] = lr;
  if (u_max >= 0.0) j["u_max"] = u_max;
  j["supervised"] = supervised;
  j["mean_weight"] = mean_weight;
  j["tokens_seen"] = tokens_seen;
  if (wall_time >= 0.0) j["wall_time"] = wall_time;
  return j.dump();
}

std::string EvalRecord::json() const {
  nlohmann::ordered_json j;
  j["kind"] = "eval";
  j["step"] = step;
  j["stage"] = stage;
  for (const auto& r : results) {
    const std::string k = "exact_match_b" + std::to_string(r.block_size);
    j[k] = r.accuracy();
  }
  j["n"] = results.empty() ? 0 : results.front().n;
  return j.dump();
}

TrainBatch prepare_batch(const CurriculumStage& stage, long stage_step, const std::vector<PackedBuffer>& buffers,
                         const Vocabulary& vocab, Rng& rng) {
  TrainBatch b;
  for (const auto& buf : buffers) {
    b.segments.push_back(buf.segments);
    b.real_tokens += buf.real_tokens();
  }
  if (stage.objective == Objective::ar) {
    for (const auto& buf : buffers) b.tokens.push_back(buf.tokens);
    return b;
  }
  double u_max = 1.0;
  if (stage.warmup && stage_step < stage.warmup->steps) {
    WarmupConfig w = *stage.warmup;
    w.step = stage_step;
    u_max = warmup_umax(w);
    b.u_max = u_max;
    b.unit_weights = true;
  }
  std::vector<std::vector<std::uint8_t>> eligible;
  for (const auto& buf : buffers) eligible.push_back(buf.trainable(vocab.bos()));

  if (stage.objective == Objective::block) {
    const int B = stage.block_size;
    for (std::size_t i = 0; i < buffers.size(); ++i) {
      const auto& x = buffers[i].tokens;
      const int n_blocks = (static_cast<int>(x.size()) + B - 1) / B;
      std::vector<int> usable;
      for (int j = 0; j < n_blocks; ++j) {
        const int end = std::min(static_cast<int>(x.size()), (j + 1) * B);
        bool any = false;
        for (int p = j * B; p < end && !any; ++p) any = eligible[i][static_cast<std::size_t>(p)];
        if (any) usable.push_back(j);
      }
      if (usable.empty()) continue;
      const double t = rng.uniform(0.0, u_max);
      const int blk = usable[rng.uniform_index(usable.size())];
      b.samples.push_back(corrupt_block(x, blk, B, clip_block_rate(mask_rate_linear(t), B), rng, vocab.mask(),
                                        eligible[i]));
    }
    if (b.samples.size() != buffers.size()) throw std::invalid_argument("prepare_batch: buffer without trainable tokens");
    return b;
  }

  for (int attempt = 0; attempt < 100000; ++attempt) {
    b.samples.clear();
    int total = 0;
    for (std::size_t i = 0; i < buffers.size(); ++i) {
      const double t = rng.uniform(0.0, u_max);
      b.samples.push_back(corrupt_full(buffers[i].tokens, mask_rate_linear(t), rng, vocab.mask(), eligible[i]));
      total += b.samples.back().masked_count();
    }
    if (total > 0) return b;
  }
  throw std::runtime_error("prepare_batch: could not draw a batch with a masked token");
}

MetricsRecord train_step(TrainState& state, const CurriculumStage& stage, long stage_step, const TrainBatch& batch,
                         const AdamWConfig& optim) {
  Tape<float> tape;
  const auto p = state.model.bind(tape, true);
  LossReport<float> rep;
  if (stage.objective == Objective::ar) {
    rep = ar_loss(state.model, tape, p, std::span<const TokenSeq>(batch.tokens),
                  std::span<const std::vector<int>>(batch.segments));
  } else {
    AttentionMaskSpec mask = stage.attention();
    const std::span<const CorruptionSample> samples(batch.samples);
    const std::span<const std::vector<int>> segs(batch.segments);
    rep = batch.unit_weights ? warmup_loss(state.model, tape, p, samples, mask, segs)
                             : dllm_loss(state.model, tape, p, samples, mask, segs);
  }
  MetricsRecord rec;
  rec.step = state.step + 1;
  rec.stage = stage.name;
  rec.stage_step = stage_step;
  rec.objective = to_string(stage.objective);
  rec.loss = rep.value;
  rec.ce = rep.mean_ce;
  rec.u_max = batch.u_max;
  rec.supervised = rep.supervised;
  rec.mean_weight = rep.mean_weight;
  if (!std::isfinite(rep.value)) {
    throw TrainingAborted("non-finite loss at step " + std::to_string(rec.step) + " (stage " + stage.name + ")");
  }
  tape.backward(rep.loss);
  Parameters<float> grads;
  for (const auto& [name, v] : p) {
    grads.emplace(name, v.grad());
    if (!grads.at(name).allFinite()) {
      throw TrainingAborted("non-finite gradient for '" + name + "' at step " + std::to_string(rec.step));
    }
  }
  rec.lr = stage.lr.at(stage_step, stage.steps);
  rec.grad_norm = adamw_update(state.model.mutable_params(), state.opt, std::move(grads), rec.lr, optim,
                               [](const std::string& n) { return !is_gain_or_bias(n); });
  ++state.step;
  state.tokens_seen += batch.real_tokens;
  rec.tokens_seen = state.tokens_seen;
  return rec;
}

BatchStream::BatchStream(const std::vector<TokenSeq>& corpus, const PackingConfig& pack, int batch_size,
                         std::uint64_t seed)
    : corpus_(corpus), pack_(pack), batch_size_(batch_size), rng_(seed, 0xba7c) {
  if (batch_size < 1) throw std::invalid_argument("BatchStream: batch size must be >= 1");
}

void BatchStream::refill() {
  ++epoch_;
  std::vector<TokenSeq> order = corpus_;
  Rng shuffle_rng = rng_.fork(2 * static_cast<std::uint64_t>(epoch_));
  shuffle_in_place(order, shuffle_rng);
  Rng pack_rng = rng_.fork(2 * static_cast<std::uint64_t>(epoch_) + 1);
  buffers_ = pack_sequences(order, pack_, pack_rng);
  if (static_cast<int>(buffers_.size()) < batch_size_) {
    throw std::invalid_argument("BatchStream: corpus packs into " + std::to_string(buffers_.size()) +
                                " buffers, fewer than one batch of " + std::to_string(batch_size_));
  }
  cursor_ = 0;
}

std::vector<PackedBuffer> BatchStream::next() {
  if (epoch_ < 0 || cursor_ + static_cast<std::size_t>(batch_size_) > buffers_.size()) refill();
  std::vector<PackedBuffer> out(buffers_.begin() + static_cast<long>(cursor_),
                                buffers_.begin() + static_cast<long>(cursor_) + batch_size_);
  cursor_ += static_cast<std::size_t>(batch_size_);
  return out;
}

bool same_parameters(const Parameters<float>& a, const Parameters<float>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, m] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols()) return false;
    if (std::memcmp(m.data(), it->second.data(), static_cast<std::size_t>(m.size()) * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

namespace {

EvalRecord evaluate(const Transformer<float>& model, const Dataset& ds, const TrainRun& run,
                    const CurriculumStage& stage, long step) {
  EvalRecord e;
  e.step = step;
  e.stage = stage.name;
  for (int b : run.eval.block_sizes) e.results.push_back(exact_match(model, ds.heldout, ds.vocab, b, stage.decode_attention()));
  return e;
}

void emit(std::ostream* out, const std::string& line) {
  if (!out) return;
  *out << line << '\n';
  out->flush();
}

}  // namespace

RunResult run_curriculum(const TrainRun& run, const RunOptions& opts) {
  run.validate();
  const Dataset ds = make_dataset(run.data, mix64(run.seed ^ 0xda7a));
  std::optional<Transformer<float>> start = opts.initial;
  if (start) {
    ModelConfig a = start->config(), b = run.model;
    a.parametrization = b.parametrization;
    if (!(a == b)) throw std::invalid_argument("run_curriculum: initial parameters come from a different model config");
    check_parameters(run.model, start->params());
  } else {
    start = Transformer<float>::initialized(run.model, mix64(run.seed ^ 0x1417));
  }
  TrainState st{*start, {}, 0, 0};
  RunResult res{*start, {}, {}, {}};

  const PackingConfig pack{run.batch.context_len, run.batch.eos_min, run.batch.eos_max,
                           ds.vocab.eos(),        ds.vocab.pad(),     ds.vocab.bos()};
  BatchStream stream(ds.train, pack, run.batch.batch_size, mix64(run.seed ^ 0xba7c));
  const Rng corrupt_root(run.seed, 0xc0de);
  const auto t0 = std::chrono::steady_clock::now();
  if (opts.out_dir) std::filesystem::create_directories(*opts.out_dir);

  for (std::size_t k = 0; k < run.stages.size(); ++k) {
    const CurriculumStage& stage = run.stages[k];
    st.opt = AdamWState<float>{};
    for (long s = 0; s < stage.steps; ++s) {
      const auto buffers = stream.next();
      Rng rng = corrupt_root.fork(static_cast<std::uint64_t>(st.step));
      TrainBatch batch = prepare_batch(stage, s, buffers, ds.vocab, rng);
      MetricsRecord rec;
      try {
        rec = train_step(st, stage, s, batch, run.optim);
      } catch (const TrainingAborted& e) {
        nlohmann::ordered_json j;
        j["kind"] = "abort";
        j["step"] = st.step + 1;
        j["stage"] = stage.name;
        j["reason"] = e.what();
        emit(opts.metrics, j.dump());
        throw;
      }
      if (run.log_wall_time) {
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      emit(opts.metrics, rec.json());
      if (opts.on_step) opts.on_step(rec);
      res.metrics.push_back(rec);
      if (run.eval.every > 0 && st.step % run.eval.every == 0 && s + 1 < stage.steps) {
        res.evals.push_back(evaluate(st.model, ds, run, stage, st.step));
        emit(opts.metrics, res.evals.back().json());
      }
    }
    res.evals.push_back(evaluate(st.model, ds, run, stage, st.step));
    emit(opts.metrics, res.evals.back().json());

    ModelConfig tagged_cfg = st.model.config();
    tagged_cfg.parametrization = stage.parametrization();
    const Transformer<float> tagged(tagged_cfg, st.model.params());
    std::vector<std::uint8_t> bytes = encode_checkpoint(tagged);
    if (opts.out_dir) {
      const auto path = *opts.out_dir / ("stage" + std::to_string(k) + "-" + stage.name + ".sdc");
      write_file_bytes(path, bytes);
      res.checkpoints.push_back(path);
      bytes = read_file_bytes(path);
    }
    Transformer<float> back = decode_checkpoint<float>(bytes);
    if (!same_parameters(back.params(), st.model.params())) {
      throw std::runtime_error("stage boundary: checkpoint round trip changed the parameters");
    }
    st.model = std::move(back);
  }
  res.model = st.model;
  return res;
}

bool has_dip_rise_dip(const std::vector<double>& values, int window, double tol) {
  if (window < 1) throw std::invalid_argument("has_dip_rise_dip: window must be >= 1");
  std::vector<double> means;
  for (std::size_t i = 0; i + static_cast<std::size_t>(window) <= values.size(); i += static_cast<std::size_t>(window)) {
    double s = 0.0;
    for (int j = 0; j < window; ++j) s += values[i + static_cast<std::size_t>(j)];
    means.push_back(s / window);
  }
  if (means.size() < 4) return false;
  const auto [lo, hi] = std::minmax_element(means.begin(), means.end());
  const double thr = tol * (*hi - *lo);
  if (!(thr > 0.0)) return false;
  std::vector<int> moves;
  int dir = 0;
  double anchor = means.front();
  for (std::size_t i = 1; i < means.size(); ++i) {
    const double m = means[i];
    if (dir <= 0 && m >= anchor + thr) {
      moves.push_back(+1);
      dir = +1;
      anchor = m;
    } else if (dir >= 0 && m <= anchor - thr) {
      moves.push_back(-1);
      dir = -1;
      anchor = m;
    } else if ((dir > 0 && m > anchor) || (dir < 0 && m < anchor)) {
      anchor = m;
    }
  }
  const int want[3] = {-1, +1, -1};
  int matched = 0;
  for (int mv : moves) {
    if (matched < 3 && mv == want[matched]) ++matched;
  }
  return matched == 3;
}

}  // namespace blockdiff

#pragma once

// Training loop and curriculum pipelines.
//
// A run is an ordered list of stages that share one parameter set. Each
// stage names an objective:
//
//   ar      next-token loss, shifted head, causal attention
//   ardllm  full-sequence masking, causal attention, unshifted head
//   bidllm  full-sequence masking, bidirectional attention
//   block   one clipped block per buffer, block-causal attention
//
// and optionally a corruption-cap warmup, during which t ~ U(0, u_max(s)) and
// token weights are dropped. Optimizer moments restart at every stage;
// parameters pass through a checkpoint round trip at each boundary.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockdiff/config.hpp"
#include "blockdiff/corruption.hpp"
#include "blockdiff/knowledge.hpp"
#include "blockdiff/model.hpp"
#include "blockdiff/objectives.hpp"
#include "blockdiff/optimizer.hpp"
#include "blockdiff/packing.hpp"

namespace blockdiff {

enum class Objective { ar, ardllm, bidllm, block };

const char* to_string(Objective o);
Objective objective_from_string(const std::string& s);

struct LrSchedule {
  double peak = 3e-3;
  long warmup_steps = 0;
  long warmdown_steps = 0;  // linear decay to 0 over the last steps of the stage

  double at(long step, long total) const;
};

struct CurriculumStage {
  std::string name = "stage";
  Objective objective = Objective::bidllm;
  int block_size = 4;
  long steps = 100;
  LrSchedule lr;
  /// Corruption-cap ramp. `step` is ignored; the stage step is used.
  std::optional<WarmupConfig> warmup;

  void validate() const;
  AttentionMaskSpec attention() const;
  Parametrization parametrization() const;
  /// Attention used when decoding a model fresh from this stage.
  MaskKind decode_attention() const;
};

struct DataConfig {
  int max_number = 20;
  ArithmeticCorpusConfig arithmetic{1, 6, 2, "a", "b"};
  long train_size = 512;
  long heldout_size = 64;
  /// Optional corpus file (one detokenized sequence per line). When set the
  /// held-out set is its last `heldout_size` lines.
  std::string path;
};

struct BatchConfig {
  int batch_size = 8;
  int context_len = 64;
  int eos_min = 1;
  int eos_max = 4;
};

struct EvalConfig {
  long every = 0;  // 0: only at stage ends
  std::vector<int> block_sizes{1, 4};
};

struct TrainRun {
  std::string name = "run";
  ModelConfig model;
  DataConfig data;
  BatchConfig batch;
  AdamWConfig optim;
  EvalConfig eval;
  std::vector<CurriculumStage> stages;
  std::uint64_t seed = 0;
  bool log_wall_time = false;
  /// When positive, validation insists the stages sum to this many steps.
  long parity_steps = 0;

  void validate() const;
  long total_steps() const;
  long tokens_per_step() const { return static_cast<long>(batch.batch_size) * batch.context_len; }

  /// Reads every key (rejecting unknown ones) and fills derived model fields.
  static TrainRun from_config(const KeyValueConfig& cfg);
  KeyValueConfig to_config() const;
};

/// Throws unless all runs have the same step count and per-step token budget.
void check_compute_parity(const std::vector<TrainRun>& runs);

struct Dataset {
  Vocabulary vocab;
  std::vector<TokenSeq> train;
  std::vector<TokenSeq> heldout;
};

/// Train and held-out sets; held-out sequences never occur in the train set.
Dataset make_dataset(const DataConfig& cfg, std::uint64_t seed);

std::vector<TokenSeq> read_corpus(const std::filesystem::path& path, const Vocabulary& vocab);
void write_corpus(const std::filesystem::path& path, const std::vector<TokenSeq>& corpus, const Vocabulary& vocab);

/// Splits a sequence after its last "=" into BOS + prefix and the answer.
std::pair<TokenSeq, TokenSeq> answer_split(const TokenSeq& seq, const Vocabulary& vocab);

struct ExactMatch {
  int block_size = 1;
  long n = 0;
  long correct = 0;
  double accuracy() const { return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0; }
};

/// Greedy block-wise decoding of every held-out answer (one commit per step).
ExactMatch exact_match(const Transformer<float>& model, const std::vector<TokenSeq>& heldout,
                       const Vocabulary& vocab, int block_size, MaskKind attention);

struct MetricsRecord {
  long step = 0;  // global, 1-based
  std::string stage;
  long stage_step = 0;
  std::string objective;
  double loss = 0.0;
  double ce = 0.0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
  double u_max = -1.0;  // < 0 outside warmup
  int supervised = 0;
  double mean_weight = 0.0;
  long tokens_seen = 0;
  double wall_time = -1.0;  // seconds, only when enabled

  std::string json() const;
};

struct EvalRecord {
  long step = 0;
  std::string stage;
  std::vector<ExactMatch> results;

  std::string json() const;
};

/// One prepared optimizer batch.
struct TrainBatch {
  std::vector<TokenSeq> tokens;          // clean buffers (AR)
  std::vector<CorruptionSample> samples;  // corrupted buffers (diffusion)
  std::vector<std::vector<int>> segments;
  double u_max = -1.0;
  bool unit_weights = false;
  long real_tokens = 0;
};

/// Builds the stage's batch from packed buffers: clean for ar, corrupted
/// otherwise. Full-sequence corruption redraws the whole batch when nothing
/// got masked.
TrainBatch prepare_batch(const CurriculumStage& stage, long stage_step, const std::vector<PackedBuffer>& buffers,
                         const Vocabulary& vocab, Rng& rng);

struct TrainState {
  Transformer<float> model;
  AdamWState<float> opt;
  long step = 0;
  long tokens_seen = 0;
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Forward, backward and one AdamW update. Throws TrainingAborted on a
/// non-finite loss or gradient without touching the parameters.
MetricsRecord train_step(TrainState& state, const CurriculumStage& stage, long stage_step, const TrainBatch& batch,
                         const AdamWConfig& optim);

/// Endless stream of packed batches: each epoch reshuffles and repacks.
class BatchStream {
 public:
  BatchStream(const std::vector<TokenSeq>& corpus, const PackingConfig& pack, int batch_size, std::uint64_t seed);
  std::vector<PackedBuffer> next();
  long epoch() const { return epoch_; }

 private:
  void refill();

  std::vector<TokenSeq> corpus_;
  PackingConfig pack_;
  int batch_size_;
  Rng rng_;
  long epoch_ = -1;
  std::vector<PackedBuffer> buffers_;
  std::size_t cursor_ = 0;
};

struct RunOptions {
  /// Checkpoints and manifest go here when set.
  std::optional<std::filesystem::path> out_dir;
  std::ostream* metrics = nullptr;  // flushed per record
  /// Start from these parameters instead of a fresh init.
  std::optional<Transformer<float>> initial;
  std::function<void(const MetricsRecord&)> on_step;
};

struct RunResult {
  Transformer<float> model;
  std::vector<MetricsRecord> metrics;
  std::vector<EvalRecord> evals;
  std::vector<std::filesystem::path> checkpoints;
};

RunResult run_curriculum(const TrainRun& run, const RunOptions& opts = {});

/// Parameters `a` and `b` are bit-identical.
bool same_parameters(const Parameters<float>& a, const Parameters<float>& b);

/// True when the smoothed curve goes down, then up, then down again.
/// Points are averaged in windows of `window`; moves smaller than `tol`
/// times the curve's range are ignored.
bool has_dip_rise_dip(const std::vector<double>& values, int window, double tol = 0.05);

}  // namespace blockdiff

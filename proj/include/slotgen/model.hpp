#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slotgen/params.hpp"
#include "slotgen/vocab.hpp"

namespace slotgen {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_encoder_layers = 2;
  std::size_t n_decoder_layers = 2;
  std::size_t ff_width = 128;
  double dropout = 0.1;
  std::size_t max_input_len = 96;
  std::size_t max_output_len = 16;
  std::size_t prefix_length = 5;
  std::uint64_t seed = 1;

  void validate() const;
};

struct ScoreResult {
  double total_log_prob = 0.0;
  // One entry per target token plus the closing EOS step.
  std::vector<double> token_log_probs;
};

struct GenerateResult {
  std::vector<int> token_ids;      // EOS terminates generation and is not emitted
  std::vector<double> token_probs; // aligned 1:1 with token_ids
};

struct Tape;  // backward-pass activation record, opaque outside model.cpp

// A from-scratch encoder-decoder transformer over word ids, double precision
// throughout. Every attention layer (encoder self, decoder self, decoder
// cross) carries trainable key/value prefix rows that are prepended to the
// projected keys/values and are always visible to attention; queries are
// never prefixed.
class Seq2SeqModel {
 public:
  Seq2SeqModel(ModelConfig config, Vocab vocab);

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }

  // Teacher-forced log-probabilities of target_ids (plus the EOS step).
  ScoreResult score_target(const std::vector<int>& input_ids,
                           const std::vector<int>& target_ids) const;

  // Cross-entropy loss (negative mean token log-prob) with gradients
  // accumulated into the store. dropout_rng enables inverted dropout when
  // non-null; loss_scale multiplies the gradient contribution (batch
  // averaging).
  double train_step_accumulate(const std::vector<int>& input_ids,
                               const std::vector<int>& target_ids, Rng* dropout_rng,
                               double loss_scale);

  // Loss without gradients or dropout; the finite-difference objective.
  double eval_loss(const std::vector<int>& input_ids, const std::vector<int>& target_ids) const;

  GenerateResult generate_greedy(const std::vector<int>& input_ids, std::size_t max_len) const;

  // Distribution over the vocabulary for the step after `emitted_prefix`.
  Eigen::VectorXd next_token_distribution(const std::vector<int>& input_ids,
                                          const std::vector<int>& emitted_prefix) const;

  std::pair<std::size_t, std::size_t> count_trainable_params() const {
    return store_.count_params();
  }

  void save_checkpoint(const std::string& path) const;
  static Seq2SeqModel load_checkpoint(const std::string& path);

 private:
  struct LinearIdx {
    std::size_t w = 0, b = 0;
  };
  struct NormIdx {
    std::size_t gain = 0, bias = 0;
  };
  struct AttnIdx {
    LinearIdx q, k, v, o;
    std::size_t prefix_k = 0, prefix_v = 0;
  };
  struct EncLayerIdx {
    NormIdx ln1, ln2;
    AttnIdx attn;
    LinearIdx ff1, ff2;
  };
  struct DecLayerIdx {
    NormIdx ln1, ln2, ln3;
    AttnIdx self_attn, cross_attn;
    LinearIdx ff1, ff2;
  };

  Matrix embed(const std::vector<int>& ids) const;
  Matrix encode(const std::vector<int>& input_ids, Rng* dropout_rng, Tape* tape) const;
  Matrix decode_logits(const Matrix& memory, const std::vector<int>& dec_input_ids,
                       Rng* dropout_rng, Tape* tape) const;
  void backward(Tape& tape, const Matrix& dlogits);
  void check_ids(const std::vector<int>& ids, std::size_t max_len, const char* what) const;

  ModelConfig cfg_;
  Vocab vocab_;
  ParameterStore store_;
  Matrix positional_;  // sinusoidal, fixed

  std::size_t embedding_ = 0;
  LinearIdx out_head_;
  NormIdx enc_final_ln_, dec_final_ln_;
  std::vector<EncLayerIdx> enc_layers_;
  std::vector<DecLayerIdx> dec_layers_;

  friend struct Tape;
};

// Gradient verification: max over `sample_size` randomly chosen trainable
// scalars of the relative error between analytic and central-difference
// gradients of the loss on one example.
double finite_difference_check(Seq2SeqModel& model, const std::vector<int>& input_ids,
                               const std::vector<int>& target_ids, double epsilon,
                               std::size_t sample_size, std::uint64_t seed = 0);

}  // namespace slotgen

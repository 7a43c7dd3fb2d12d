#pragma once

// Source distributions, the factorized conditional path, and the two desk-scale
// datasets: the 128x128 checkerboard and a packed character corpus.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepflow/kinetics.hpp"
#include "stepflow/rng.hpp"
#include "stepflow/types.hpp"

namespace stepflow {

class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(int size, std::optional<Token> mask_id = std::nullopt);

  int size() const { return size_; }
  const std::optional<Token>& mask_id() const { return mask_id_; }
  bool has_mask() const { return mask_id_.has_value(); }
  bool is_mask(Token tok) const { return mask_id_ && *mask_id_ == tok; }
  bool contains(Token tok) const { return tok >= 0 && tok < size_; }

  // Number of tokens that can appear in clean data.
  int data_size() const { return size_ - (mask_id_ ? 1 : 0); }
  // k-th non-mask token, k in [0, data_size()).
  Token data_token(int k) const;
  // Inverse of data_token; -1 for the mask token.
  int data_index(Token tok) const;

 private:
  int size_ = 1;
  std::optional<Token> mask_id_;
};

enum class SourceKind { uniform, mask };

struct SourceSpec {
  SourceKind kind = SourceKind::uniform;
};

std::string to_string(SourceKind kind);
SourceKind parse_source_kind(const std::string& name);

void validate_sequence(const Sequence& seq, const Vocab& vocab);

// Draw x0 ~ p0: all-mask, or i.i.d. uniform over the non-mask tokens.
Sequence sample_source(const SourceSpec& spec, const Vocab& vocab, std::size_t length, Rng& rng);

// Per position, the x1 token with probability kappa(t), else the x0 token.
Sequence sample_conditional_xt(const Sequence& x0, const Sequence& x1, double t,
                               const Scheduler& scheduler, Rng& rng);

struct CheckerboardSpec {
  int grid = 128;
  int block = 32;

  int block_index(Token x) const { return x / block; }
  bool valid(Token x1, Token x2) const {
    return (block_index(x1) % 2) == (block_index(x2) % 2);
  }
  // Number of admissible x2 values for any x1.
  int cells_per_row() const;
  // Dense joint p1(x1, x2) on grid x grid.
  Eigen::MatrixXd density() const;
};

void validate(const CheckerboardSpec& spec);

// x1 uniform; x2 uniform over the blocks whose index parity matches x1's block.
Sequence checkerboard_sample(const CheckerboardSpec& spec, Rng& rng);

// Concatenate documents each followed by eos, split into consecutive blocks of
// length L, and drop the trailing partial block.
std::vector<Sequence> pack_corpus(const std::vector<Sequence>& documents, Token eos,
                                  std::size_t length);

struct Corruption {
  Sequence corrupted;
  std::vector<bool> changed;
};

// Replace exactly round(fraction * L) distinct positions with a uniform draw over
// the non-mask tokens other than the original.
Corruption corrupt(const Sequence& x, double fraction, const Vocab& vocab, Rng& rng);

// Byte-level vocabulary: sorted distinct bytes of a corpus, followed by EOS and
// optionally a mask token.
class CharVocab {
 public:
  static constexpr int kMaxSize = 64;

  CharVocab() = default;
  static CharVocab from_documents(const std::vector<std::string>& documents, bool with_mask);
  static CharVocab from_alphabet(const std::string& alphabet, bool with_mask);

  const std::string& alphabet() const { return alphabet_; }
  Token eos() const { return static_cast<Token>(alphabet_.size()); }
  Vocab vocab() const;

  Sequence encode(const std::string& text) const;
  // EOS renders as '\n'; the mask token as '_'.
  std::string decode(const Sequence& seq) const;

 private:
  std::string alphabet_;
  bool with_mask_ = false;
};

// One document per non-empty line.
std::vector<std::string> read_documents(const std::filesystem::path& path);

// Two-column CSV "x1,x2" of checkerboard samples.
void write_pairs_csv(const std::filesystem::path& path, const std::vector<Sequence>& samples);

}  // namespace stepflow

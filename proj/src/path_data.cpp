#include "stepflow/path_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "stepflow/errors.hpp"

namespace stepflow {

Vocab::Vocab(int size, std::optional<Token> mask_id) : size_(size), mask_id_(mask_id) {
  if (size < 1) throw ConfigError("vocabulary size must be positive");
  if (mask_id && (*mask_id < 0 || *mask_id >= size)) {
    throw ConfigError("mask_id must be a token id below the vocabulary size");
  }
}

Token Vocab::data_token(int k) const {
  if (mask_id_ && k >= *mask_id_) return static_cast<Token>(k + 1);
  return static_cast<Token>(k);
}

int Vocab::data_index(Token tok) const {
  if (!mask_id_) return tok;
  if (tok == *mask_id_) return -1;
  return tok > *mask_id_ ? tok - 1 : tok;
}

std::string to_string(SourceKind kind) { return kind == SourceKind::uniform ? "uniform" : "mask"; }

SourceKind parse_source_kind(const std::string& name) {
  if (name == "uniform") return SourceKind::uniform;
  if (name == "mask") return SourceKind::mask;
  throw ConfigError("unknown source kind '" + name + "' (expected uniform|mask)");
}

void validate_sequence(const Sequence& seq, const Vocab& vocab) {
  for (Token tok : seq) {
    if (!vocab.contains(tok)) {
      std::ostringstream msg;
      msg << "token " << tok << " outside vocabulary of size " << vocab.size();
      throw ValidationError(msg.str());
    }
  }
}

Sequence sample_source(const SourceSpec& spec, const Vocab& vocab, std::size_t length, Rng& rng) {
  if (spec.kind == SourceKind::mask) {
    if (!vocab.has_mask()) throw ConfigError("mask source requires a vocabulary with a mask token");
    return Sequence(length, *vocab.mask_id());
  }
  Sequence out(length);
  const auto n = static_cast<std::size_t>(vocab.data_size());
  for (auto& tok : out) tok = vocab.data_token(static_cast<int>(rng.below(n)));
  return out;
}

Sequence sample_conditional_xt(const Sequence& x0, const Sequence& x1, double t,
                               const Scheduler& scheduler, Rng& rng) {
  if (x0.size() != x1.size()) {
    throw ValidationError("sample_conditional_xt: x0 and x1 differ in length");
  }
  const double kappa = kappa_eval(scheduler, t).kappa;
  Sequence out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    out[i] = rng.uniform() < kappa ? x1[i] : x0[i];
  }
  return out;
}

int CheckerboardSpec::cells_per_row() const {
  const int blocks = grid / block;
  // Blocks with the same parity as block 0 (even) or block 1 (odd).
  return block * ((blocks + 1) / 2);
}

void validate(const CheckerboardSpec& spec) {
  if (spec.grid <= 0 || spec.block <= 0 || spec.grid % spec.block != 0) {
    throw ConfigError("checkerboard block must divide grid");
  }
  if (spec.grid / spec.block < 2) throw ConfigError("checkerboard needs at least two blocks");
  if ((spec.grid / spec.block) % 2 != 0) {
    throw ConfigError("checkerboard needs an even number of blocks");
  }
}

Eigen::MatrixXd CheckerboardSpec::density() const {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(grid, grid);
  const double mass = 1.0 / (static_cast<double>(grid) * cells_per_row());
  for (int a = 0; a < grid; ++a) {
    for (int b = 0; b < grid; ++b) {
      if (valid(a, b)) p(a, b) = mass;
    }
  }
  return p;
}

Sequence checkerboard_sample(const CheckerboardSpec& spec, Rng& rng) {
  const auto x1 = static_cast<Token>(rng.below(static_cast<std::size_t>(spec.grid)));
  const int parity = spec.block_index(x1) % 2;
  // Pick one of the matching-parity blocks, then a cell inside it.
  const int blocks_of_parity = (spec.grid / spec.block) / 2;
  const int k = static_cast<int>(rng.below(static_cast<std::size_t>(blocks_of_parity)));
  const int cell = static_cast<int>(rng.below(static_cast<std::size_t>(spec.block)));
  const auto x2 = static_cast<Token>((2 * k + parity) * spec.block + cell);
  return {x1, x2};
}

std::vector<Sequence> pack_corpus(const std::vector<Sequence>& documents, Token eos,
                                  std::size_t length) {
  if (length < 2) throw ValidationError("pack_corpus: block length must be at least 2");
  std::vector<Sequence> blocks;
  Sequence current;
  current.reserve(length);
  auto push = [&](Token tok) {
    current.push_back(tok);
    if (current.size() == length) {
      blocks.push_back(std::move(current));
      current = Sequence();
      current.reserve(length);
    }
  };
  for (const auto& doc : documents) {
    for (Token tok : doc) push(tok);
    push(eos);
  }
  return blocks;
}

Corruption corrupt(const Sequence& x, double fraction, const Vocab& vocab, Rng& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ValidationError("corrupt: fraction must lie in [0, 1]");
  }
  const std::size_t length = x.size();
  const auto count = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(length)));
  Corruption out{x, std::vector<bool>(length, false)};
  if (count == 0) return out;
  if (vocab.data_size() <= 1) {
    throw ValidationError("corrupt: vocabulary too small to replace a token by a different one");
  }
  // Partial Fisher-Yates: the first `count` entries are a uniform subset.
  std::vector<std::size_t> order(length);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(length - i);
    std::swap(order[i], order[j]);
  }
  const auto n = static_cast<std::size_t>(vocab.data_size());
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t pos = order[k];
    const int original = vocab.data_index(x[pos]);
    Token replacement;
    if (original < 0) {
      replacement = vocab.data_token(static_cast<int>(rng.below(n)));
    } else {
      // Uniform over the n-1 data tokens other than the original.
      auto r = static_cast<int>(rng.below(n - 1));
      if (r >= original) ++r;
      replacement = vocab.data_token(r);
    }
    out.corrupted[pos] = replacement;
    out.changed[pos] = true;
  }
  return out;
}

CharVocab CharVocab::from_alphabet(const std::string& alphabet, bool with_mask) {
  std::set<unsigned char> unique(alphabet.begin(), alphabet.end());
  CharVocab cv;
  cv.alphabet_.assign(unique.begin(), unique.end());
  cv.with_mask_ = with_mask;
  const int size = static_cast<int>(cv.alphabet_.size()) + 1 + (with_mask ? 1 : 0);
  if (size > kMaxSize) {
    std::ostringstream msg;
    msg << "character vocabulary has " << size << " entries; at most " << kMaxSize
        << " are supported (fold case or strip symbols from the corpus)";
    throw ConfigError(msg.str());
  }
  return cv;
}

CharVocab CharVocab::from_documents(const std::vector<std::string>& documents, bool with_mask) {
  std::string all;
  for (const auto& doc : documents) all += doc;
  return from_alphabet(all, with_mask);
}

Vocab CharVocab::vocab() const {
  const int base = static_cast<int>(alphabet_.size()) + 1;
  if (with_mask_) return Vocab(base + 1, static_cast<Token>(base));
  return Vocab(base);
}

Sequence CharVocab::encode(const std::string& text) const {
  Sequence out;
  out.reserve(text.size());
  for (char c : text) {
    const auto it = std::lower_bound(alphabet_.begin(), alphabet_.end(), c,
                                     [](char a, char b) {
                                       return static_cast<unsigned char>(a) <
                                              static_cast<unsigned char>(b);
                                     });
    if (it == alphabet_.end() || *it != c) {
      throw ValidationError(std::string("character '") + c + "' is not in the vocabulary");
    }
    out.push_back(static_cast<Token>(it - alphabet_.begin()));
  }
  return out;
}

std::string CharVocab::decode(const Sequence& seq) const {
  std::string out;
  out.reserve(seq.size());
  for (Token tok : seq) {
    if (tok >= 0 && tok < static_cast<Token>(alphabet_.size())) {
      out.push_back(alphabet_[static_cast<std::size_t>(tok)]);
    } else if (tok == eos()) {
      out.push_back('\n');
    } else {
      out.push_back('_');
    }
  }
  return out;
}

std::vector<std::string> read_documents(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) docs.push_back(line);
  }
  return docs;
}

void write_pairs_csv(const std::filesystem::path& path, const std::vector<Sequence>& samples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "x1,x2\n";
  for (const auto& s : samples) {
    if (s.size() != 2) throw ValidationError("write_pairs_csv: samples must have length 2");
    out << s[0] << ',' << s[1] << '\n';
  }
}

}  // namespace stepflow

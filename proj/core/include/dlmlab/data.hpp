#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlmlab/rng.hpp"
#include "dlmlab/transformer.hpp"

namespace dlmlab {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by the reserved
// specials. The bos id doubles as the document separator when packing.
struct Vocab {
  static constexpr std::int32_t n_bytes = 256;
  static constexpr std::int32_t mask = 256;
  static constexpr std::int32_t pad = 257;
  static constexpr std::int32_t bos = 258;
  static constexpr std::int32_t size = 259;
};

std::vector<std::int32_t> tokenize(std::string_view text);

struct Detokenized {
  std::string text;
  std::int64_t dropped_specials = 0;
};
Detokenized detokenize(std::span<const std::int32_t> tokens);

// Chops a concatenated token stream into fixed windows; the final partial
// window is dropped.
std::vector<std::vector<std::int32_t>> pack_sequences(std::span<const std::int32_t> tokens,
                                                      std::int64_t seq_len);

// Concatenates documents with a separator token after each one.
std::vector<std::int32_t> concat_documents(const std::vector<std::string>& docs,
                                           std::int32_t separator = Vocab::bos);

struct BudgetedCorpus {
  std::string path;                 // newline-delimited documents
  std::int64_t unique_tokens = 0;   // U, counted pre-packing
  std::int64_t total_tokens = 0;    // T, delivered including repetition
  std::int64_t seq_len = 256;
  std::uint64_t seed = 0;
  std::string tier = "default";     // opaque quality label
};

struct Batch {
  TokenBatch tokens;
  double epoch = 0.0;        // fractional epochs completed when the batch starts
  std::int64_t index = 0;
};

// Deterministic data-constrained stream: picks exactly U unique tokens once
// (contiguous documents from a seeded start), packs them into windows, and
// replays the windows epoch after epoch with an independent shuffle per
// epoch until T tokens have been delivered.
class BatchStream {
 public:
  BatchStream(BudgetedCorpus corpus, std::int64_t batch_size);

  std::optional<Batch> next();

  std::int64_t num_windows() const { return static_cast<std::int64_t>(windows_.size()); }
  std::int64_t delivered_tokens() const { return cursor_.delivered; }
  std::int64_t total_batches() const;  // = ceil(T / (batch * seq_len))
  const BudgetedCorpus& corpus() const { return corpus_; }

  struct Cursor {
    std::int64_t epoch = 0;
    std::int64_t pos = 0;  // next window slot within the epoch permutation
    std::int64_t delivered = 0;
    std::int64_t batch_index = 0;
  };
  Cursor cursor() const { return cursor_; }
  void restore(const Cursor& cursor);

  // Window order for a given epoch (deterministic in corpus seed + epoch).
  std::vector<std::int64_t> epoch_order(std::int64_t epoch) const;

 private:
  BudgetedCorpus corpus_;
  std::int64_t batch_size_;
  std::vector<std::vector<std::int32_t>> windows_;
  std::vector<std::int64_t> order_;
  Cursor cursor_;
};

// Held-out windows with a persistent wrapping cursor, so successive
// evaluations see successive subsets.
class ValStream {
 public:
  ValStream(std::string path, std::int64_t seq_len);

  std::vector<std::vector<std::int32_t>> next_windows(std::int64_t n);
  std::int64_t num_windows() const { return static_cast<std::int64_t>(windows_.size()); }
  std::int64_t cursor() const { return cursor_; }
  void set_cursor(std::int64_t cursor) { cursor_ = cursor; }
  const std::string& text() const { return text_; }

 private:
  std::string text_;
  std::vector<std::vector<std::int32_t>> windows_;
  std::int64_t cursor_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace dlmlab

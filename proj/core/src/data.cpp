#include "dlmlab/data.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dlmlab {

std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    ids[i] = static_cast<std::int32_t>(static_cast<unsigned char>(text[i]));
  }
  return ids;
}

Detokenized detokenize(std::span<const std::int32_t> tokens) {
  Detokenized out;
  out.text.reserve(tokens.size());
  for (auto id : tokens) {
    if (id >= 0 && id < Vocab::n_bytes) {
      out.text.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else {
      ++out.dropped_specials;
    }
  }
  return out;
}

std::vector<std::vector<std::int32_t>> pack_sequences(std::span<const std::int32_t> tokens,
                                                      std::int64_t seq_len) {
  if (seq_len < 1) throw std::invalid_argument("pack_sequences: seq_len must be >= 1");
  const std::int64_t n_windows = static_cast<std::int64_t>(tokens.size()) / seq_len;
  std::vector<std::vector<std::int32_t>> windows;
  windows.reserve(static_cast<std::size_t>(n_windows));
  for (std::int64_t w = 0; w < n_windows; ++w) {
    windows.emplace_back(tokens.begin() + w * seq_len, tokens.begin() + (w + 1) * seq_len);
  }
  return windows;
}

std::vector<std::int32_t> concat_documents(const std::vector<std::string>& docs,
                                           std::int32_t separator) {
  std::vector<std::int32_t> out;
  for (const auto& doc : docs) {
    auto ids = tokenize(doc);
    out.insert(out.end(), ids.begin(), ids.end());
    out.push_back(separator);
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return std::move(ss).str();
}

void write_file(const std::string& path, std::string_view contents) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!os) throw std::runtime_error("write failed for " + path);
}

namespace {

std::vector<std::string> split_documents(const std::string& text) {
  std::vector<std::string> docs;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    if (end > start) docs.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return docs;
}

}  // namespace

BatchStream::BatchStream(BudgetedCorpus corpus, std::int64_t batch_size)
    : corpus_(std::move(corpus)), batch_size_(batch_size) {
  if (batch_size_ < 1) throw std::invalid_argument("BatchStream: batch_size must be >= 1");
  if (corpus_.unique_tokens < corpus_.seq_len) {
    throw std::invalid_argument("BatchStream: unique_tokens " +
                                std::to_string(corpus_.unique_tokens) +
                                " below one window of " + std::to_string(corpus_.seq_len));
  }
  if (corpus_.total_tokens < corpus_.unique_tokens) {
    throw std::invalid_argument("BatchStream: total_tokens must be >= unique_tokens");
  }

  const auto docs = split_documents(read_file(corpus_.path));
  if (docs.empty()) throw std::invalid_argument("BatchStream: no documents in " + corpus_.path);
  std::int64_t available = 0;
  for (const auto& d : docs) available += static_cast<std::int64_t>(d.size()) + 1;
  if (available < corpus_.unique_tokens) {
    throw std::invalid_argument("BatchStream: source holds " + std::to_string(available) +
                                " tokens, need " + std::to_string(corpus_.unique_tokens) +
                                " unique");
  }

  // Contiguous documents from a seeded start until the unique budget is met.
  Rng rng(corpus_.seed, 0xDA7A);
  const std::size_t start = static_cast<std::size_t>(rng.below(docs.size()));
  std::vector<std::int32_t> selected;
  selected.reserve(static_cast<std::size_t>(corpus_.unique_tokens));
  for (std::size_t i = 0; static_cast<std::int64_t>(selected.size()) < corpus_.unique_tokens; ++i) {
    const auto& doc = docs[(start + i) % docs.size()];
    auto ids = tokenize(doc);
    ids.push_back(Vocab::bos);
    for (auto id : ids) {
      selected.push_back(id);
      if (static_cast<std::int64_t>(selected.size()) == corpus_.unique_tokens) break;
    }
  }
  windows_ = pack_sequences(selected, corpus_.seq_len);
  if (windows_.empty()) throw std::invalid_argument("BatchStream: zero full windows selected");
  order_ = epoch_order(0);
}

std::vector<std::int64_t> BatchStream::epoch_order(std::int64_t epoch) const {
  std::vector<std::int64_t> order(windows_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  Rng rng = Rng(corpus_.seed, 0x5F0F1E).fork(static_cast<std::uint64_t>(epoch));
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::int64_t BatchStream::total_batches() const {
  const std::int64_t per_batch = batch_size_ * corpus_.seq_len;
  return (corpus_.total_tokens + per_batch - 1) / per_batch;
}

void BatchStream::restore(const Cursor& cursor) {
  cursor_ = cursor;
  order_ = epoch_order(cursor_.epoch);
}

std::optional<Batch> BatchStream::next() {
  if (cursor_.delivered >= corpus_.total_tokens) return std::nullopt;
  Batch batch;
  batch.epoch = static_cast<double>(cursor_.delivered) / static_cast<double>(corpus_.unique_tokens);
  batch.index = cursor_.batch_index;
  batch.tokens.rows = batch_size_;
  batch.tokens.cols = corpus_.seq_len;
  batch.tokens.ids.reserve(static_cast<std::size_t>(batch_size_ * corpus_.seq_len));
  for (std::int64_t r = 0; r < batch_size_; ++r) {
    if (cursor_.pos >= static_cast<std::int64_t>(order_.size())) {
      ++cursor_.epoch;
      cursor_.pos = 0;
      order_ = epoch_order(cursor_.epoch);
    }
    const auto& window = windows_[static_cast<std::size_t>(order_[static_cast<std::size_t>(cursor_.pos)])];
    batch.tokens.ids.insert(batch.tokens.ids.end(), window.begin(), window.end());
    ++cursor_.pos;
    cursor_.delivered += corpus_.seq_len;
  }
  ++cursor_.batch_index;
  return batch;
}

ValStream::ValStream(std::string path, std::int64_t seq_len) {
  text_ = read_file(path);
  if (text_.empty()) throw std::invalid_argument("ValStream: empty held-out file " + path);
  const auto docs = split_documents(text_);
  windows_ = pack_sequences(concat_documents(docs), seq_len);
  if (windows_.empty()) {
    throw std::invalid_argument("ValStream: held-out file too small for seq_len " +
                                std::to_string(seq_len));
  }
}

std::vector<std::vector<std::int32_t>> ValStream::next_windows(std::int64_t n) {
  if (n < 1) throw std::invalid_argument("ValStream: n must be >= 1");
  std::vector<std::vector<std::int32_t>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    out.push_back(windows_[static_cast<std::size_t>(cursor_ % num_windows())]);
    ++cursor_;
  }
  return out;
}

}  // namespace dlmlab

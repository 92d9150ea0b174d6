#pragma once

#include <cstdint>
#include <string>

namespace dlmlab {

// Deterministic template-grammar text: one document per line, each a short
// paragraph of simple sentences over fixed word pools. Used for desk-scale
// corpora in tests, benchmarks and the quickstart.
std::string synthetic_corpus(std::uint64_t seed, std::int64_t n_docs);

}  // namespace dlmlab

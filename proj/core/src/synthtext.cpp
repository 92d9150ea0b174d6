#include "dlmlab/synthtext.hpp"

#include <array>
#include <stdexcept>

#include "dlmlab/rng.hpp"

namespace dlmlab {

namespace {

constexpr std::array kNames = {
    "mara",  "tobin", "ida",    "ansel", "petra", "quill",  "sorrel", "veda",
    "lionel", "hattie", "oswin", "nadia", "felix", "greta",  "hollis", "imre",
    "june",  "kerem", "lotte",  "milo",  "noor",  "ottilie", "pavel",  "rhea"};
constexpr std::array kVerbs = {"carries", "paints",  "repairs", "counts", "borrows", "studies",
                               "polishes", "weighs",  "trades",  "stacks", "sketches", "mends",
                               "measures", "gathers", "delivers", "labels"};
constexpr std::array kNouns = {"lantern", "ledger", "kettle",  "compass", "bundle", "basket",
                               "spindle", "chart",  "bell",    "crate",   "ribbon", "mirror",
                               "anchor",  "candle", "satchel", "pulley",  "stamp",  "quilt",
                               "flask",   "hinge",  "marble",  "banner",  "whistle", "spool"};
constexpr std::array kAdjs = {"copper", "narrow", "quiet",  "heavy",  "pale",   "worn",
                              "bright", "crooked", "smooth", "dusty",  "slender", "round",
                              "faded",  "sturdy", "hollow", "painted"};
constexpr std::array kPlaces = {"harbor",  "archive", "orchard", "market", "workshop", "granary",
                                "lighthouse", "cellar", "square",  "mill",   "foundry",  "garden",
                                "station", "bakery",  "library", "wharf"};

template <typename Pool>
const char* pick(Rng& rng, const Pool& pool) {
  return pool[static_cast<std::size_t>(rng.below(pool.size()))];
}

std::string sentence(Rng& rng) {
  std::string s;
  switch (rng.below(6)) {
    case 0:
      s = std::string(pick(rng, kNames)) + " " + pick(rng, kVerbs) + " the " + pick(rng, kAdjs) +
          " " + pick(rng, kNouns) + " near the " + pick(rng, kPlaces) + ".";
      break;
    case 1:
      s = std::string("the ") + pick(rng, kAdjs) + " " + pick(rng, kNouns) + " in the " +
          pick(rng, kPlaces) + " belongs to " + pick(rng, kNames) + ".";
      break;
    case 2:
      s = std::string(pick(rng, kNames)) + " and " + pick(rng, kNames) + " trade a " +
          pick(rng, kNouns) + " for a " + pick(rng, kNouns) + " at the " + pick(rng, kPlaces) +
          ".";
      break;
    case 3:
      s = std::string("every morning ") + pick(rng, kNames) + " walks to the " +
          pick(rng, kPlaces) + " with a " + pick(rng, kAdjs) + " " + pick(rng, kNouns) + ".";
      break;
    case 4:
      s = std::string("when the ") + pick(rng, kNouns) + " breaks, " + pick(rng, kNames) + " " +
          pick(rng, kVerbs) + " it before dusk.";
      break;
    default:
      s = std::string("nobody in the ") + pick(rng, kPlaces) + " " + pick(rng, kVerbs) +
          " the " + pick(rng, kNouns) + " twice.";
      break;
  }
  return s;
}

}  // namespace

std::string synthetic_corpus(std::uint64_t seed, std::int64_t n_docs) {
  if (n_docs < 1) throw std::invalid_argument("synthetic_corpus: n_docs must be >= 1");
  std::string out;
  Rng rng(seed, 0x7E77);
  for (std::int64_t d = 0; d < n_docs; ++d) {
    Rng doc_rng = rng.fork(static_cast<std::uint64_t>(d));
    const std::uint64_t n_sentences = 2 + doc_rng.below(4);
    for (std::uint64_t s = 0; s < n_sentences; ++s) {
      if (s) out += ' ';
      out += sentence(doc_rng);
    }
    out += '\n';
  }
  return out;
}

}  // namespace dlmlab

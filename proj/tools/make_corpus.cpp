// Deterministic synthetic text for training runs and tests.
//
// The generator emits a small invented language: each "topic" owns a
// vocabulary of pronounceable words built from a topic-specific set of
// letters, sentences draw words from the active topic with a skewed rank
// distribution, and topics persist for a handful of sentences before
// switching. That gives the text three scales of structure — within-word
// letter bigrams, within-sentence word reuse, and topic runs spanning a few
// hundred bytes — so both next-token models and the chunk-level context
// pathway have something real to learn. Same seed, same bytes, always.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctxlm/rng.hpp"

using ctxlm::SplitMix64;
using ctxlm::named_stream;

namespace {

constexpr const char* kConsonants = "bcdfghjklmnprstvz";  // 17
constexpr const char* kVowels = "aeiou";                  // 5

std::string make_word(SplitMix64& g, int topic) {
  // Each topic sees a rotated 9-consonant / 3-vowel window of the alphabet,
  // so topics are separable from letter statistics alone.
  const int syllables = 2 + static_cast<int>(g.next_below(3));
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w.push_back(kConsonants[(topic * 4 + g.next_below(9)) % 17]);
    w.push_back(kVowels[(topic + g.next_below(3)) % 5]);
    if (g.next_below(4) == 0) w.push_back(kConsonants[(topic * 4 + g.next_below(9)) % 17]);
  }
  return w;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emit a deterministic synthetic training corpus"};
  std::string out;
  int64_t bytes = 1 << 20;
  uint64_t seed = 1;
  int topics = 4;
  int words_per_topic = 48;
  app.add_option("--out", out, "output file")->required();
  app.add_option("--bytes", bytes, "minimum size in bytes (default 1 MiB)");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--topics", topics, "number of topics")->check(CLI::Range(1, 32));
  app.add_option("--words-per-topic", words_per_topic, "vocabulary size per topic")
      ->check(CLI::Range(4, 4096));
  CLI11_PARSE(app, argc, argv);

  SplitMix64 vocab_rng = named_stream(seed, "corpus.vocab");
  std::vector<std::vector<std::string>> vocab(topics);
  for (int t = 0; t < topics; ++t)
    for (int i = 0; i < words_per_topic; ++i) vocab[t].push_back(make_word(vocab_rng, t));

  SplitMix64 g = named_stream(seed, "corpus.text");
  std::string text;
  text.reserve(static_cast<size_t>(bytes) + 256);
  int topic = static_cast<int>(g.next_below(static_cast<uint64_t>(topics)));
  int sentences_in_paragraph = 0;
  while (static_cast<int64_t>(text.size()) < bytes) {
    const int words = 4 + static_cast<int>(g.next_below(7));
    for (int i = 0; i < words; ++i) {
      // Quadratic skew: low-rank words dominate, Zipf-like reuse.
      double u = g.next_double();
      size_t idx = static_cast<size_t>(u * u * words_per_topic);
      if (idx >= vocab[topic].size()) idx = vocab[topic].size() - 1;
      text += vocab[topic][idx];
      text.push_back(i + 1 == words ? '.' : ' ');
    }
    if (++sentences_in_paragraph >= 4 + static_cast<int>(g.next_below(4))) {
      text.push_back('\n');
      sentences_in_paragraph = 0;
    } else {
      text.push_back(' ');
    }
    if (g.next_below(6) == 0) topic = static_cast<int>(g.next_below(static_cast<uint64_t>(topics)));
  }

  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text).flush()) {
    std::cerr << "cannot write '" << out << "'\n";
    return 2;
  }
  std::cout << out << ": " << text.size() << " bytes\n";
  return 0;
}

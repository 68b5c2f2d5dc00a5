// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ipa/checkpoint.hpp"

namespace ipa {
namespace {

bool unique_chars(std::string_view s) { return std::set<char>(s.begin(), s.end()).size() == s.size(); }

class TextGenerator {
 public:
  TextGenerator(const SyntheticCorpusSpec& spec, Rng& rng) : spec_(spec), rng_(rng) {
    const std::size_t n = spec.alphabet.size();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> all(n);
      for (std::size_t j = 0; j < n; ++j) all[j] = j;
      std::shuffle(all.begin(), all.end(), rng_.engine());
      all.resize(spec.branching);
      std::sort(all.begin(), all.end());
      successors_.push_back(std::move(all));
    }
  }

  // `length` characters of the base grammar with toxic injection.
  std::string text(std::size_t length) {
    std::string out;
    std::size_t state = rng_.index(spec_.alphabet.size());
    std::size_t phase = rng_.index(spec_.period.size());
    while (out.size() < length) {
      if (spec_.injection_rate > 0.0 && rng_.bernoulli(spec_.injection_rate)) {
        out.push_back(spec_.toxic[rng_.index(spec_.toxic.size())]);
        continue;
      }
      if (spec_.grammar == Grammar::kPeriodic) {
        out.push_back(spec_.period[phase]);
        phase = (phase + 1) % spec_.period.size();
      } else {
        out.push_back(spec_.alphabet[state]);
        const auto& next = successors_[state];
        state = next[rng_.index(next.size())];
      }
    }
    return out;
  }

  std::size_t length() { return spec_.min_length + rng_.index(spec_.max_length - spec_.min_length + 1); }

  std::string keyword_text() {
    std::string pool = spec_.alphabet;
    std::shuffle(pool.begin(), pool.end(), rng_.engine());
    const std::string keys = pool.substr(0, spec_.num_keywords);
    std::string out = keys + spec_.separator;
    std::string body;
    if (rng_.bernoulli(spec_.copy_rate)) body = std::string(1, spec_.cue) + keys;
    const std::size_t target = length();
    if (body.size() < target) body += text(target - body.size());
    return out + body;
  }

 private:
  const SyntheticCorpusSpec& spec_;
  Rng& rng_;
  std::vector<std::vector<std::size_t>> successors_;
};

std::string split_jsonl(const std::vector<std::string>& texts, std::string_view split, std::string_view digest) {
  std::ostringstream out;
  out << nlohmann::json{{"kind", "corpus"}, {"split", split}, {"recipe_digest", digest}, {"count", texts.size()}}.dump()
      << '\n';
  for (const std::string& t : texts) out << nlohmann::json{{"text", t}}.dump() << '\n';
  return out.str();
}

std::vector<std::string> read_split(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<std::string> texts;
  try {
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
    const auto header = nlohmann::json::parse(line);
    const auto count = header.at("count").get<std::size_t>();
    while (std::getline(in, line)) {
      if (!line.empty()) texts.push_back(nlohmann::json::parse(line).at("text").get<std::string>());
    }
    if (texts.size() != count) throw FormatError(path.string() + ": record count differs from header");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return texts;
}

}  // namespace

std::string_view grammar_name(Grammar g) {
  switch (g) {
    case Grammar::kMarkov:
      return "markov";
    case Grammar::kPeriodic:
      return "periodic";
    case Grammar::kKeywords:
      return "keywords";
  }
  return "markov";
}

Grammar parse_grammar(std::string_view name) {
  if (name == "markov") return Grammar::kMarkov;
  if (name == "periodic") return Grammar::kPeriodic;
  if (name == "keywords") return Grammar::kKeywords;
  throw ConfigError("unknown grammar '" + std::string(name) + "' (expected markov|periodic|keywords)");
}

void SyntheticCorpusSpec::validate() const {
  if (alphabet.empty() || !unique_chars(alphabet)) throw ConfigError("corpus: alphabet must be non-empty and unique");
  if (!unique_chars(toxic)) throw ConfigError("corpus: toxic symbols must be unique");
  for (char c : toxic) {
    if (alphabet.find(c) != std::string::npos) throw ConfigError("corpus: toxic symbols overlap the alphabet");
  }
  if (!(injection_rate >= 0.0 && injection_rate <= 1.0)) throw ConfigError("corpus: injection_rate must lie in [0, 1]");
  if (injection_rate > 0.0 && toxic.empty()) throw ConfigError("corpus: injection needs toxic symbols");
  if (branching < 1 || branching > alphabet.size()) throw ConfigError("corpus: branching must lie in [1, |alphabet|]");
  if (num_sequences < 1) throw ConfigError("corpus: num_sequences must be positive");
  if (min_length < 1 || min_length > max_length) throw ConfigError("corpus: need 1 <= min_length <= max_length");
  if (grammar == Grammar::kPeriodic) {
    if (period.empty()) throw ConfigError("corpus: periodic grammar needs a pattern");
    for (char c : period) {
      if (alphabet.find(c) == std::string::npos) throw ConfigError("corpus: period uses symbols outside the alphabet");
    }
  }
  if (grammar == Grammar::kKeywords) {
    if (num_keywords < 1 || num_keywords > alphabet.size()) throw ConfigError("corpus: bad num_keywords");
    if (!(copy_rate >= 0.0 && copy_rate <= 1.0)) throw ConfigError("corpus: copy_rate must lie in [0, 1]");
    const std::string extra{separator, cue};
    if (!unique_chars(alphabet + toxic + extra)) throw ConfigError("corpus: separator and cue must be new symbols");
  }
  for (double f : {train_fraction, val_fraction, test_fraction}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("corpus: split fractions must lie in [0, 1]");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ConfigError("corpus: split fractions must sum to 1");
  }
}

std::string SyntheticCorpusSpec::symbols() const {
  std::string s = alphabet + toxic;
  if (grammar == Grammar::kKeywords) s += std::string{separator, cue};
  return s;
}

Corpus gen_corpus(const SyntheticCorpusSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, {0x636f7270}));
  TextGenerator gen(spec, rng);
  std::vector<std::string> all;
  all.reserve(spec.num_sequences);
  for (std::size_t i = 0; i < spec.num_sequences; ++i) {
    all.push_back(spec.grammar == Grammar::kKeywords ? gen.keyword_text() : gen.text(gen.length()));
  }
  const auto n = static_cast<double>(all.size());
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * n));
  const auto n_val = std::min(all.size() - n_train, static_cast<std::size_t>(std::floor(spec.val_fraction * n)));
  Corpus c;
  c.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
               all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  c.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), all.end());
  return c;
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, std::string_view digest) {
  std::filesystem::create_directories(dir);
  write_file(dir / "train.jsonl", split_jsonl(corpus.train, "train", digest));
  write_file(dir / "val.jsonl", split_jsonl(corpus.val, "val", digest));
  write_file(dir / "test.jsonl", split_jsonl(corpus.test, "test", digest));
}

Corpus read_corpus(const std::filesystem::path& dir) {
  return Corpus{read_split(dir / "train.jsonl"), read_split(dir / "val.jsonl"), read_split(dir / "test.jsonl")};
}

double symbol_rate(const std::vector<std::string>& texts, std::string_view symbols) {
  std::size_t hits = 0, total = 0;
  for (const std::string& t : texts) {
    total += t.size();
    for (char c : t) hits += symbols.find(c) != std::string_view::npos ? 1 : 0;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

std::vector<TokenSeq> encode_corpus(const Vocab& vocab, const std::vector<std::string>& texts) {
  std::vector<TokenSeq> out;
  out.reserve(texts.size());
  for (const std::string& t : texts) {
    TokenSeq s{Vocab::kBos};
    const TokenSeq body = vocab.encode(t);
    s.insert(s.end(), body.begin(), body.end());
    s.push_back(Vocab::kEos);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TokenSeq> make_prompts(const Vocab& vocab, const std::vector<std::string>& texts, std::size_t length) {
  std::vector<TokenSeq> out;
  out.reserve(texts.size());
  for (const std::string& t : texts) {
    TokenSeq s{Vocab::kBos};
    const TokenSeq body = vocab.encode(t.substr(0, length));
    s.insert(s.end(), body.begin(), body.end());
    out.push_back(std::move(s));
  }
  return out;
}

ToxicityTask make_toxicity_task(const SyntheticCorpusSpec& spec, const Corpus& corpus, int num_control,
                                std::size_t prompt_length) {
  ToxicityTask task;
  task.vocab = Vocab::from_alphabet(spec.symbols(), num_control);
  for (char c : spec.toxic) task.toxic.insert(task.vocab.id_of(std::string(1, c)));
  task.train = encode_corpus(task.vocab, corpus.train);
  task.val = encode_corpus(task.vocab, corpus.val);
  task.train_prompts = make_prompts(task.vocab, corpus.train, prompt_length);
  task.test_prompts = make_prompts(task.vocab, corpus.test, prompt_length);
  return task;
}

TokenSeq KeywordTask::keywords_of(std::span<const TokenId> prompt) const {
  if (prompt.size() < num_keywords + 1) throw DomainError("prompt too short to carry keywords");
  return TokenSeq(prompt.begin() + 1, prompt.begin() + 1 + static_cast<std::ptrdiff_t>(num_keywords));
}

std::vector<TokenSeq> KeywordTask::train_prompts() const {
  std::vector<TokenSeq> out;
  out.reserve(train_instances.size());
  for (const ConstraintInstance& c : train_instances) out.push_back(c.prompt);
  return out;
}

KeywordTask make_keyword_task(const SyntheticCorpusSpec& spec, const Corpus& corpus, int num_control) {
  if (spec.grammar != Grammar::kKeywords) throw ConfigError("keyword task needs the keywords grammar");
  KeywordTask task;
  task.vocab = Vocab::from_alphabet(spec.symbols(), num_control);
  task.num_keywords = spec.num_keywords;
  task.train = encode_corpus(task.vocab, corpus.train);
  task.val = encode_corpus(task.vocab, corpus.val);
  auto instances = [&](const std::vector<std::string>& texts) {
    std::vector<ConstraintInstance> out;
    for (const TokenSeq& p : make_prompts(task.vocab, texts, spec.num_keywords + 1)) {
      out.push_back(ConstraintInstance{p, task.keywords_of(p)});
    }
    return out;
  };
  task.train_instances = instances(corpus.train);
  task.test_instances = instances(corpus.test);
  return task;
}

CompositeReward keyword_reward(const KeywordTask& task, const PolicyHandle& reference) {
  const std::size_t k = task.num_keywords;
  return CompositeReward({coverage_reward_spec([k](std::span<const TokenId> prompt) {
                            if (prompt.size() < k + 1) throw DomainError("prompt too short to carry keywords");
                            return TokenSeq(prompt.begin() + 1, prompt.begin() + 1 + static_cast<std::ptrdiff_t>(k));
                          }),
                          fluency_reward_spec(reference)});
}

}  // namespace ipa

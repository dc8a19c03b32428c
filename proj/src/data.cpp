#include "claps/data.hpp"

#include <fstream>
#include <functional>
#include <sstream>
#include <unordered_set>

#include "claps/errors.hpp"
#include "claps/rng.hpp"
#include "json.hpp"

namespace claps {

Vocab::Vocab() {
  for (const char* reserved : {"<pad>", "<bos>", "<eos>", "<unk>"}) {
    token_to_id_.emplace(reserved, static_cast<int>(id_to_token_.size()));
    id_to_token_.emplace_back(reserved);
  }
}

int Vocab::add(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  const int id = static_cast<int>(id_to_token_.size());
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(token);
  return id;
}

int Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

bool Vocab::contains(const std::string& token) const {
  return token_to_id_.count(token) > 0;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("Vocab::token: id out of range");
  return id_to_token_[static_cast<std::size_t>(id)];
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i < kNumReservedIds) {
      if (tokens[i] != v.id_to_token_[i]) {
        throw ValueError("Vocab::from_tokens: reserved tokens out of place");
      }
      continue;
    }
    v.add(tokens[i]);
  }
  return v;
}

std::uint64_t content_hash(const TokenSeq& source, const TokenSeq& target) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ULL;
  };
  mix(source.size());
  for (int id : source) mix(static_cast<std::uint64_t>(id) + 0x9e37);
  mix(0xffffULL);
  for (int id : target) mix(static_cast<std::uint64_t>(id) + 0x9e37);
  return h;
}

namespace {

// Deduplicated generation with hash partitioning: bucket 0..7 train,
// 8 valid, 9 test. Same content always lands in the same split.
TaskData partition(std::vector<std::pair<TokenSeq, TokenSeq>> pairs, Vocab vocab) {
  TaskData data;
  data.vocab = std::move(vocab);
  data.train.split = Split::Train;
  data.valid.split = Split::Valid;
  data.test.split = Split::Test;
  for (auto& pair : pairs) {
    const std::uint64_t bucket = content_hash(pair.first, pair.second) % 10;
    if (bucket < 8) {
      data.train.pairs.push_back(std::move(pair));
    } else if (bucket == 8) {
      data.valid.pairs.push_back(std::move(pair));
    } else {
      data.test.pairs.push_back(std::move(pair));
    }
  }
  return data;
}

std::vector<std::pair<TokenSeq, TokenSeq>> generate_unique(
    int n, Rng& rng,
    const std::function<std::pair<TokenSeq, TokenSeq>(Rng&)>& gen) {
  std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
  std::unordered_set<std::uint64_t> seen;
  pairs.reserve(static_cast<std::size_t>(n));
  // Cap attempts so tiny token spaces terminate instead of spinning.
  const long attempts_cap = 64L * n + 4096;
  long attempts = 0;
  while (static_cast<int>(pairs.size()) < n && attempts < attempts_cap) {
    ++attempts;
    auto pair = gen(rng);
    if (seen.insert(content_hash(pair.first, pair.second)).second) {
      pairs.push_back(std::move(pair));
    }
  }
  if (static_cast<int>(pairs.size()) < n) {
    throw ConfigError("task generator: token space too small for requested corpus size");
  }
  return pairs;
}

TokenSeq random_seq(Rng& rng, int vocab_size, int max_len) {
  const int len = 1 + rng.uniform_int(max_len);
  TokenSeq seq(static_cast<std::size_t>(len));
  for (int& id : seq) id = kNumReservedIds + rng.uniform_int(vocab_size - kNumReservedIds);
  return seq;
}

Vocab synthetic_vocab(int vocab_size) {
  Vocab vocab;
  for (int i = kNumReservedIds; i < vocab_size; ++i) {
    vocab.add("w" + std::to_string(i));
  }
  return vocab;
}

const char* kOnes[] = {"zero", "one",  "two", "three", "four",
                       "five", "six",  "seven", "eight", "nine"};
const char* kTeens[] = {"ten",      "eleven",  "twelve",  "thirteen", "fourteen",
                        "fifteen",  "sixteen", "seventeen", "eighteen", "nineteen"};
const char* kTens[] = {"",      "",      "twenty", "thirty", "forty",
                       "fifty", "sixty", "seventy", "eighty", "ninety"};

std::vector<std::string> number_words(int value, bool compositional) {
  std::vector<std::string> words;
  const std::string digits = std::to_string(value);
  if (!compositional) {
    for (char c : digits) words.emplace_back(kOnes[c - '0']);
    return words;
  }
  if (value == 0) return {"zero"};
  int rest = value;
  if (rest >= 1000) {
    words.emplace_back(kOnes[rest / 1000]);
    words.emplace_back("thousand");
    rest %= 1000;
  }
  if (rest >= 100) {
    words.emplace_back(kOnes[rest / 100]);
    words.emplace_back("hundred");
    rest %= 100;
  }
  if (rest >= 20) {
    words.emplace_back(kTens[rest / 10]);
    rest %= 10;
    if (rest > 0) words.emplace_back(kOnes[rest]);
  } else if (rest >= 10) {
    words.emplace_back(kTeens[rest - 10]);
  } else if (rest > 0) {
    words.emplace_back(kOnes[rest]);
  }
  return words;
}

}  // namespace

TaskData gen_copy(int n, int vocab_size, int max_len, std::uint64_t seed) {
  if (n < 1) throw ConfigError("gen_copy: n must be >= 1");
  if (vocab_size < 4) throw ConfigError("gen_copy: vocab_size must be >= 4");
  if (vocab_size <= kNumReservedIds) {
    throw ConfigError("gen_copy: vocab reserves ids 0..3; need content tokens");
  }
  if (max_len < 1) throw ConfigError("gen_copy: max_len must be >= 1");
  Rng rng(seed);
  auto pairs = generate_unique(n, rng, [&](Rng& r) {
    TokenSeq src = random_seq(r, vocab_size, max_len);
    return std::make_pair(src, src);
  });
  return partition(std::move(pairs), synthetic_vocab(vocab_size));
}

TaskData gen_reverse(int n, int vocab_size, int max_len, std::uint64_t seed) {
  if (n < 1) throw ConfigError("gen_reverse: n must be >= 1");
  if (vocab_size < 4) throw ConfigError("gen_reverse: vocab_size must be >= 4");
  if (vocab_size <= kNumReservedIds) {
    throw ConfigError("gen_reverse: vocab reserves ids 0..3; need content tokens");
  }
  if (max_len < 1) throw ConfigError("gen_reverse: max_len must be >= 1");
  Rng rng(seed);
  auto pairs = generate_unique(n, rng, [&](Rng& r) {
    TokenSeq src = random_seq(r, vocab_size, max_len);
    TokenSeq tgt(src.rbegin(), src.rend());
    return std::make_pair(std::move(src), std::move(tgt));
  });
  return partition(std::move(pairs), synthetic_vocab(vocab_size));
}

TaskData gen_num2word(int n, int max_value, std::uint64_t seed, bool compositional) {
  if (n < 1) throw ConfigError("gen_num2word: n must be >= 1");
  if (max_value < 0 || max_value > 9999) {
    throw ConfigError("gen_num2word: max_value must be in [0, 9999]");
  }
  Vocab vocab;
  for (int d = 0; d <= 9; ++d) vocab.add(std::string(1, static_cast<char>('0' + d)));
  for (const char* w : kOnes) vocab.add(w);
  for (const char* w : kTeens) vocab.add(w);
  for (int i = 2; i <= 9; ++i) vocab.add(kTens[i]);
  vocab.add("hundred");
  vocab.add("thousand");

  Rng rng(seed);
  auto pairs = generate_unique(
      std::min(n, max_value + 1), rng, [&](Rng& r) {
        const int value = r.uniform_int(max_value + 1);
        const std::string digits = std::to_string(value);
        TokenSeq src;
        for (char c : digits) src.push_back(vocab.id(std::string(1, c)));
        TokenSeq tgt;
        for (const auto& w : number_words(value, compositional)) {
          tgt.push_back(vocab.id(w));
        }
        return std::make_pair(std::move(src), std::move(tgt));
      });
  return partition(std::move(pairs), std::move(vocab));
}

std::vector<std::string> tokenize(const std::string& text, TokenizerMode mode) {
  std::vector<std::string> tokens;
  if (mode == TokenizerMode::Whitespace) {
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) tokens.push_back(tok);
  } else {
    for (char c : text) tokens.emplace_back(1, c);
  }
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens, TokenizerMode mode) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (mode == TokenizerMode::Whitespace && i > 0) out += ' ';
    out += tokens[i];
  }
  return out;
}

JsonlCorpus load_jsonl(const std::string& path, const std::string& source_field,
                       const std::string& target_field, TokenizerMode mode,
                       const Vocab* fixed_vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("load_jsonl: cannot open " + path);
  JsonlCorpus result;
  if (fixed_vocab != nullptr) result.vocab = *fixed_vocab;
  const bool frozen = fixed_vocab != nullptr;

  auto encode = [&result, frozen](const std::vector<std::string>& tokens) {
    TokenSeq seq;
    seq.reserve(tokens.size());
    for (const auto& tok : tokens) {
      seq.push_back(frozen ? result.vocab.id(tok) : result.vocab.add(tok));
    }
    return seq;
  };

  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("load_jsonl: malformed JSON at line " + std::to_string(line_no) +
                       ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains(source_field) || !obj.contains(target_field)) {
      throw SchemaError("load_jsonl: line " + std::to_string(line_no) +
                        " missing field '" +
                        (obj.is_object() && obj.contains(source_field) ? target_field
                                                                       : source_field) +
                        "'");
    }
    if (!obj[source_field].is_string() || !obj[target_field].is_string()) {
      throw SchemaError("load_jsonl: line " + std::to_string(line_no) +
                        " fields must be strings");
    }
    TokenSeq src = encode(tokenize(obj[source_field].get<std::string>(), mode));
    TokenSeq tgt = encode(tokenize(obj[target_field].get<std::string>(), mode));
    if (src.empty() || tgt.empty()) {
      throw SchemaError("load_jsonl: line " + std::to_string(line_no) +
                        " has an empty sequence");
    }
    result.corpus.pairs.emplace_back(std::move(src), std::move(tgt));
  }
  return result;
}

std::string seq_to_string(const TokenSeq& seq, const Vocab& vocab, TokenizerMode mode) {
  std::vector<std::string> tokens;
  tokens.reserve(seq.size());
  for (int id : seq) tokens.push_back(vocab.token(id));
  return detokenize(tokens, mode);
}

}  // namespace claps

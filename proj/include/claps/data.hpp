#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "claps/types.hpp"

namespace claps {

// String <-> id table with the reserved ids 0=PAD, 1=BOS, 2=EOS, 3=UNK.
// Non-reserved entries keep insertion order.
class Vocab {
 public:
  Vocab();

  int add(const std::string& token);        // returns existing id if present
  int id(const std::string& token) const;   // kUnkId when absent
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }

  const std::vector<std::string>& tokens() const { return id_to_token_; }
  static Vocab from_tokens(const std::vector<std::string>& tokens);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

enum class Split { Train, Valid, Test };

struct ParallelCorpus {
  std::vector<std::pair<TokenSeq, TokenSeq>> pairs;  // (source, target), raw ids
  Split split = Split::Train;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

// A generated task: shared vocabulary plus hash-partitioned splits.
struct TaskData {
  Vocab vocab;
  ParallelCorpus train, valid, test;
};

TaskData gen_copy(int n, int vocab_size, int max_len, std::uint64_t seed);
TaskData gen_reverse(int n, int vocab_size, int max_len, std::uint64_t seed);
// Digit-string to English-words translation. compositional=false spells
// digits one by one ("42" -> "four two"); true uses number names
// ("42" -> "forty two"). max_value <= 9999.
TaskData gen_num2word(int n, int max_value, std::uint64_t seed,
                      bool compositional = false);

enum class TokenizerMode { Whitespace, Char };

std::vector<std::string> tokenize(const std::string& text, TokenizerMode mode);
std::string detokenize(const std::vector<std::string>& tokens, TokenizerMode mode);

// One JSON object per line with the named source/target fields. When a fixed
// vocab is given, unseen tokens map to UNK; otherwise the vocab is built from
// the corpus in encounter order.
struct JsonlCorpus {
  Vocab vocab;
  ParallelCorpus corpus;
};
JsonlCorpus load_jsonl(const std::string& path, const std::string& source_field,
                       const std::string& target_field, TokenizerMode mode,
                       const Vocab* fixed_vocab = nullptr);

// FNV-1a over the token ids of a pair; used for split partitioning.
std::uint64_t content_hash(const TokenSeq& source, const TokenSeq& target);

std::string seq_to_string(const TokenSeq& seq, const Vocab& vocab,
                          TokenizerMode mode = TokenizerMode::Whitespace);

}  // namespace claps

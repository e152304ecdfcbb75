#include <fstream>
#include <sstream>

#include "mtclip/error.hpp"
#include "mtclip/synthdata.hpp"

namespace mtclip {

Vocab Vocab::builtin() {
  Vocab v;
  v.words_ = {"<pad>", "<bos>", "<eos>", "<unk>", "a",     "photo", "of",
              "left",  "right", "above", "below"};
  for (const char* c : color_names()) v.words_.emplace_back(c);
  for (const char* s : shape_names()) v.words_.emplace_back(s);
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open vocab file " + path.string());
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    v.words_.push_back(line);
  }
  if (v.words_.size() <= static_cast<std::size_t>(kUnk) || v.words_[kPad] != "<pad>" ||
      v.words_[kBos] != "<bos>" || v.words_[kEos] != "<eos>" || v.words_[kUnk] != "<unk>") {
    throw InputError("vocab file " + path.string() + " must start with <pad> <bos> <eos> <unk>");
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write vocab file " + path.string());
  for (const auto& w : words_) out << w << '\n';
}

std::int64_t Vocab::id(std::string_view word) const {
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == word) return static_cast<std::int64_t>(i);
  return kUnk;
}

const std::string& Vocab::word(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    throw InputError("token id " + std::to_string(id) + " outside vocab of size " +
                     std::to_string(words_.size()));
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::int64_t> tokenize(std::string_view caption, const Vocab& vocab,
                                   std::size_t context_length) {
  if (context_length < 2) throw ArgumentError("tokenize: context length must be >= 2");
  std::vector<std::int64_t> ids{Vocab::kBos};
  std::istringstream words{std::string(caption)};
  std::string w;
  while (words >> w) ids.push_back(vocab.id(w));
  if (ids.size() + 1 > context_length) ids.resize(context_length - 1);
  ids.push_back(Vocab::kEos);
  ids.resize(context_length, Vocab::kPad);
  return ids;
}

}  // namespace mtclip

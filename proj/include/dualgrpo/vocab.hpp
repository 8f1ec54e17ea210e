#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace dualgrpo {

using Token = std::size_t;

/// Token layout: [0, C) raw prompts, [C, C+M) mode names, then filler
/// "thought" tokens, then SEP and EOS as the last two ids.
class Vocab {
 public:
  Vocab(std::size_t size, std::size_t prompts, std::size_t modes)
      : size_(size), prompts_(prompts), modes_(modes) {
    if (prompts == 0 || modes == 0) throw std::invalid_argument("Vocab: need at least one prompt and one mode");
    if (size < prompts + modes + 2) {
      throw std::invalid_argument("Vocab: size " + std::to_string(size) + " < prompts + modes + 2 = " +
                                  std::to_string(prompts + modes + 2));
    }
  }

  std::size_t size() const { return size_; }
  std::size_t prompts() const { return prompts_; }
  std::size_t modes() const { return modes_; }
  std::size_t fillers() const { return size_ - prompts_ - modes_ - 2; }

  Token prompt(std::size_t q) const { return checked(q, prompts_, "prompt"); }
  Token mode(std::size_t k) const { return prompts_ + checked(k, modes_, "mode"); }
  Token filler(std::size_t f) const { return prompts_ + modes_ + checked(f, fillers(), "filler"); }
  Token sep() const { return size_ - 2; }
  Token eos() const { return size_ - 1; }

  bool contains(Token t) const { return t < size_; }
  bool is_mode(Token t) const { return t >= prompts_ && t < prompts_ + modes_; }
  std::optional<std::size_t> mode_of(Token t) const {
    if (!is_mode(t)) return std::nullopt;
    return t - prompts_;
  }

 private:
  static std::size_t checked(std::size_t i, std::size_t n, const char* what) {
    if (i >= n) throw std::out_of_range(std::string("Vocab: ") + what + " index " + std::to_string(i) + " out of range");
    return i;
  }

  std::size_t size_, prompts_, modes_;
};

}  // namespace dualgrpo

#ifndef GLOSS_HASH_HPP
#define GLOSS_HASH_HPP

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>

namespace gloss {

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void add(std::string_view bytes) {
    for (unsigned char c : bytes) {
      h_ ^= c;
      h_ *= 0x100000001b3ULL;
    }
  }
  void add_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h_ ^= (v >> (8 * i)) & 0xFF;
      h_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const noexcept { return h_; }
  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h_;
    return os.str();
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view bytes) {
  Fnv1a h;
  h.add(bytes);
  return h.hex();
}

}  // namespace gloss

#endif  // GLOSS_HASH_HPP

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace detq {

inline constexpr const char* kVersion = "0.1.0";

// All recoverable failures surface as detq::Error with a human-readable
// message naming the offending value or dimension.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
[[noreturn]] inline void raise(std::ostringstream& os) { throw Error(os.str()); }
}  // namespace detail

}  // namespace detq

#define DETQ_CHECK(cond, ...)                          \
  do {                                                 \
    if (!(cond)) {                                     \
      std::ostringstream detq_os__;                    \
      detq_os__ << __VA_ARGS__;                        \
      ::detq::detail::raise(detq_os__);                \
    }                                                  \
  } while (0)

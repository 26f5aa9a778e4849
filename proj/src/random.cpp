#include "gmt/random.hpp"

#include <sstream>

namespace gmt {

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw LoadError("malformed RNG state");
}

}  // namespace gmt

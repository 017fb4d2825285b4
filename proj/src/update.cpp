#include "fedq/update.hpp"

#include <charconv>

#include "fedq/errors.hpp"

namespace fedq {

BitWidthConfig BitWidthConfig::parse(const std::string& dash_string,
                                     std::size_t expected_layers) {
  BitWidthConfig cfg;
  std::size_t start = 0;
  while (true) {
    std::size_t dash = dash_string.find('-', start);
    std::string_view tok(dash_string.data() + start,
                         (dash == std::string::npos ? dash_string.size()
                                                    : dash) -
                             start);
    int v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size())
      throw ConfigError("malformed bit-width string '" + dash_string + "'");
    if (v < 1 || v > 32)
      throw ConfigError("bit width " + std::to_string(v) +
                        " outside [1, 32] in '" + dash_string + "'");
    cfg.bits.push_back(v);
    if (dash == std::string::npos) break;
    start = dash + 1;
  }
  if (cfg.bits.size() != expected_layers)
    throw ConfigError("expected " + std::to_string(expected_layers) +
                      " bit widths, got " + std::to_string(cfg.bits.size()) +
                      " in '" + dash_string + "'");
  return cfg;
}

std::string BitWidthConfig::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(bits[i]);
  }
  return s;
}

}  // namespace fedq

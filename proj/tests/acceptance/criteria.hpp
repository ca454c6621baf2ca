#pragma once

// Acceptance suites. Each prints one PASS/FAIL line per criterion.

#include <iosfwd>
#include <string>
#include <vector>

namespace rapo::acceptance {

std::vector<std::string> suite_names();

/// Runs one suite (or "all"); returns true when every criterion passed.
/// Throws ConfigError on an unknown suite name.
bool run_suite(const std::string& name, std::ostream& os);

}  // namespace rapo::acceptance

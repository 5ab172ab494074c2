#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace terse {

// Run body(i) for i in [0, n) on up to `threads` workers. Each index must be
// independent; results are written by index so output order never depends
// on scheduling. Exceptions are rethrown on the calling thread.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

std::string sha256_hex(const void* data, std::size_t n);
std::string sha256_file(const std::string& path);

// Shortest round-trip decimal text for a double.
std::string fmt_double(double v);

double mean_of(const std::vector<double>& v);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace terse

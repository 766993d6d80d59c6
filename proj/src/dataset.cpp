#include "spec/dataset.hpp"

#include <atomic>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <mutex>
#include <thread>

#include "spec/util.hpp"

namespace spec {

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write file: " + path);
  f << content;
}

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  threads = resolve_threads(threads);
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mu);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n_workers = static_cast<int>(std::min<size_t>(threads, n));
  pool.reserve(n_workers);
  for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

int resolve_threads(int requested) {
  if (const char* env = std::getenv("SPEC_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

std::vector<const DatasetRecord*> Dataset::split_view(Split s) const {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

Dataset generate_dataset(const StateRanges& ranges, int k, const SpectralGrid& grid,
                         const LineDatabase& db, uint64_t seed, int threads) {
  if (k < 10) throw std::invalid_argument("generate_dataset: K must be >= 10");
  if (ranges.t_min > ranges.t_max || ranges.c_min > ranges.c_max)
    throw std::domain_error("generate_dataset: range min > max");
  if (!(ranges.t_min > 0) || ranges.c_min < 0 || ranges.c_max > 1)
    throw std::domain_error("generate_dataset: ranges outside the valid state space");

  Dataset ds;
  ds.seed = seed;
  ds.records.resize(k);
  parallel_for(static_cast<size_t>(k), threads, [&](size_t i) {
    RngStream rng(substream(seed, i), 0);
    auto& rec = ds.records[i];
    rec.state.temperature = rng.uniform(ranges.t_min, ranges.t_max);
    rec.state.mole_fraction = rng.uniform(ranges.c_min, ranges.c_max);
    rec.spectrum = simulate_absorbance(rec.state, grid, db);
  });

  // 70/15/15 split by seeded Fisher-Yates shuffle of the record indices
  std::vector<int> order(k);
  for (int i = 0; i < k; ++i) order[i] = i;
  RngStream shuffle_rng(substream(seed, 0x5B17ull), 1);
  for (int i = k - 1; i > 0; --i) {
    const int j = static_cast<int>(shuffle_rng.index(static_cast<uint64_t>(i) + 1));
    std::swap(order[i], order[j]);
  }
  const int n_train = (7 * k) / 10;
  const int n_val = (15 * k) / 100;
  for (int pos = 0; pos < k; ++pos) {
    Split s = pos < n_train ? Split::train : (pos < n_train + n_val ? Split::val : Split::test);
    ds.records[order[pos]].split = s;
  }
  return ds;
}

namespace {

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

Split split_from(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::runtime_error("dataset csv: unknown split label " + s);
}

}  // namespace

void save_dataset_csv(const Dataset& ds, const std::string& path) {
  if (ds.records.empty()) throw std::invalid_argument("save_dataset_csv: empty dataset");
  std::ostringstream os;
  const size_t n = ds.records.front().spectrum.size();
  os << "split,temperature,mole_fraction";
  for (size_t i = 0; i < n; ++i) os << ",y_" << i;
  os << "\n";
  for (const auto& r : ds.records) {
    os << split_name(r.split) << "," << format_g9(r.state.temperature) << ","
       << format_g9(r.state.mole_fraction);
    for (double v : r.spectrum.values) os << "," << format_g9(v);
    os << "\n";
  }
  write_text_file(path, os.str());
}

Dataset load_dataset_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read dataset: " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("dataset csv: empty file " + path);

  Dataset ds;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    DatasetRecord rec;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    rec.split = split_from(cell);
    std::getline(ss, cell, ',');
    rec.state.temperature = std::stod(cell);
    std::getline(ss, cell, ',');
    rec.state.mole_fraction = std::stod(cell);
    while (std::getline(ss, cell, ',')) rec.spectrum.values.push_back(std::stod(cell));
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace spec

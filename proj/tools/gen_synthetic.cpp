// Writes NSL-KDD-shaped synthetic train/test files for trying the pipeline
// without the real dataset.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "synthetic_nslkdd.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate synthetic NSL-KDD-format files"};
  std::string out_dir = ".";
  std::size_t train_rows = 12000, test_rows = 2400;
  std::uint64_t seed = 7;
  app.add_option("--out", out_dir, "Directory for KDDTrain+.txt and KDDTest+.txt")
      ->capture_default_str();
  app.add_option("--train-rows", train_rows, "Training rows")->capture_default_str();
  app.add_option("--test-rows", test_rows, "Test rows")->capture_default_str();
  app.add_option("--seed", seed, "Generator seed")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  std::filesystem::create_directories(out_dir);
  auto write = [&](const char* name, std::size_t rows, std::uint64_t s) {
    fedft::testing::SyntheticOptions opt;
    opt.rows = rows;
    opt.seed = s;
    std::ofstream f(std::filesystem::path(out_dir) / name, std::ios::binary);
    f << fedft::testing::synthetic_nslkdd(opt);
    if (!f) {
      std::cerr << "cannot write " << name << "\n";
      return false;
    }
    return true;
  };
  if (!write("KDDTrain+.txt", train_rows, seed) || !write("KDDTest+.txt", test_rows, seed + 1)) {
    return 1;
  }
  std::cout << "wrote " << train_rows << " + " << test_rows << " rows to " << out_dir << "\n";
  return 0;
}

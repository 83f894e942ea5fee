#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "twig/error.hpp"
#include "twig/weights_io.hpp"

using namespace twig;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("twig_test_" + name)).string();
}

std::vector<char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(WeightsIo, HeaderLayoutIsLittleEndian) {
  const ModelConfig cfg{2, 8, 2, 16, 10, 12};
  auto m = init_model(cfg, 1);
  const auto path = temp_path("header.bin");
  save_weights(path, m);
  auto bytes = read_all(path);
  ASSERT_GE(bytes.size(), 28u);
  EXPECT_EQ(std::string(bytes.data(), 4), "TWG1");
  const std::uint32_t expect[] = {2, 8, 2, 16, 10, 12};
  for (int i = 0; i < 6; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + 4 * i + b])) << (8 * b);
    EXPECT_EQ(v, expect[i]);
  }
  // Tensor count: V*d + P*d + per-layer (4d^2 + 2*d*dff + 4d) + 2d + d*V
  const std::size_t d = 8, f = 16, V = 10, P = 12;
  const std::size_t doubles = V * d + P * d + 2 * (4 * d * d + 2 * d * f + 4 * d) + 2 * d + d * V;
  EXPECT_EQ(bytes.size(), 28 + 8 * doubles);
  // First tensor value is embedding(0, 0).
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[28 + b])) << (8 * b);
  EXPECT_EQ(std::bit_cast<double>(bits), m.embedding(0, 0));
  std::remove(path.c_str());
}

TEST(WeightsIo, RoundTripWithTwig) {
  const auto cfg = testing_util::small_config(4, 16, 2, 24, 40);
  auto base = testing_util::shared_model(cfg, 2);
  auto tm = attach_twig(base, {1, 2, TwigInit::Random}, 3);
  const auto path = temp_path("roundtrip.bin");
  save_weights(path, *base, &tm);
  auto loaded = load_weights(path);
  EXPECT_EQ(loaded.base->config, cfg);
  EXPECT_EQ(checksum(*loaded.base), checksum(*base));
  ASSERT_TRUE(loaded.twig);
  EXPECT_EQ(loaded.twig->config.trunk_depth, 1u);
  EXPECT_EQ(loaded.twig->config.init, TwigInit::Random);
  EXPECT_EQ(twig_checksum(*loaded.twig), twig_checksum(tm));
  EXPECT_EQ(loaded.twig->base, loaded.base);
  std::remove(path.c_str());
}

TEST(WeightsIo, RoundTripWithoutTwig) {
  auto m = init_model(testing_util::small_config(), 4);
  const auto path = temp_path("plain.bin");
  save_weights(path, m);
  auto loaded = load_weights(path);
  EXPECT_FALSE(loaded.twig);
  EXPECT_EQ(checksum(*loaded.base), checksum(m));
  std::remove(path.c_str());
}

TEST(WeightsIo, RejectsCorruptFiles) {
  auto m = init_model(testing_util::small_config(), 4);
  const auto path = temp_path("corrupt.bin");
  save_weights(path, m);
  auto bytes = read_all(path);

  auto write = [&](const std::vector<char>& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  write(std::vector<char>(bytes.begin(), bytes.end() - 3));
  EXPECT_THROW(load_weights(path), IoError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write(bad_magic);
  EXPECT_THROW(load_weights(path), IoError);
  auto bad_header = bytes;
  bad_header[4] = 0;  // L = 0
  write(bad_header);
  EXPECT_THROW(load_weights(path), IoError);
  auto trailing = bytes;
  trailing.insert(trailing.end(), {'j', 'u', 'n', 'k'});
  write(trailing);
  EXPECT_THROW(load_weights(path), IoError);
  std::remove(path.c_str());
  EXPECT_THROW(load_weights(path), IoError);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "graphsc/config.hpp"
#include "graphsc/model_io.hpp"

using namespace graphsc;

namespace {

std::vector<float> flatten(const ScNetModel<float>& m) {
  std::vector<float> out;
  m.visit([&](const std::string&, const float* p, std::size_t n) { out.insert(out.end(), p, p + n); });
  return out;
}

std::string error_text(const nlohmann::json& j) {
  try {
    config_from_json(j);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
    return e.what();
  }
  return {};
}

std::filesystem::path temp(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(Config, DefaultsValidate) {
  const PipelineConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.train.epochs, 40u);
  EXPECT_EQ(c.arch.feature_width(), 256u);
}

TEST(Config, JsonRoundTrip) {
  const PipelineConfig base = config_from_json({{"sigma_d", 0.1}, {"epochs", 7}, {"feature_width", 32}, {"augment", true}});
  EXPECT_EQ(base.graph.sigma_d, 0.1);
  EXPECT_EQ(base.train.epochs, 7u);
  EXPECT_TRUE(base.train.augment);
  EXPECT_EQ(base.arch.init_widths, (std::vector<std::size_t>{32, 32, 32}));
  const nlohmann::json j = to_json(base);
  EXPECT_EQ(to_json(config_from_json(j)), j);
  // Every registered key is echoed.
  for (const auto& [key, _] : detail::config_keys()) EXPECT_TRUE(j.contains(key)) << key;
}

TEST(Config, PartialDocumentKeepsBase) {
  PipelineConfig base;
  base.tau_s = 0.7;
  const auto c = config_from_json({{"k", 3}}, base);
  EXPECT_EQ(c.tau_s, 0.7);
  EXPECT_EQ(c.graph.k, 3u);
}

TEST(Config, Rejections) {
  EXPECT_NE(error_text({{"sigma_x", 1.0}}).find("sigma_x"), std::string::npos);
  EXPECT_NE(error_text({{"tau_s", 1.5}}).find("tau_s"), std::string::npos);
  EXPECT_NE(error_text({{"k", 0}}).find("k"), std::string::npos);
  EXPECT_NE(error_text({{"k", -2}}).find("k"), std::string::npos);
  EXPECT_NE(error_text({{"sigma_d", "wide"}}).find("sigma_d"), std::string::npos);
  EXPECT_NE(error_text({{"lr_decay", 1.0}}).find("lr_decay"), std::string::npos);
  EXPECT_NE(error_text({{"feature_width", 0}}).find("feature_width"), std::string::npos);
  // Width not divisible by the group count fails whole-config validation.
  EXPECT_NE(error_text({{"feature_width", 12}}), "");
  EXPECT_NE(error_text(nlohmann::json::array()), "");
}

TEST(Config, ReadFile) {
  const auto path = temp("graphsc_config_test.json");
  {
    std::ofstream out(path);
    out << R"({"tau_s": 0.25, "model_seed": 9})";
  }
  const auto c = read_config(path);
  EXPECT_EQ(c.tau_s, 0.25);
  EXPECT_EQ(c.model_seed, 9u);
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  EXPECT_THROW(read_config(path), Error);
  std::filesystem::remove(path);
  try {
    read_config(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(ModelIo, RoundTripParameters) {
  const auto arch = Architecture::micro();
  const auto model = ScNetModel<float>::initialized(arch, 5);
  const auto path = temp("graphsc_model_test.bin");
  save_model(path, model);
  const auto loaded = load_model(path, arch);
  EXPECT_FALSE(loaded.adam.has_value());
  EXPECT_EQ(flatten(loaded.model), flatten(model));
  std::filesystem::remove(path);
}

TEST(ModelIo, RoundTripOptimizerState) {
  const auto arch = Architecture::micro();
  auto model = ScNetModel<float>::initialized(arch, 6);
  AdamOptimizer<float> adam(arch, 1e-6);
  auto grad = ScNetModel<float>::initialized(arch, 7);
  adam.step(model, grad, 1e-3);
  adam.step(model, grad, 1e-3);
  const auto path = temp("graphsc_ckpt_test.bin");
  save_model(path, model, &adam);
  auto loaded = load_model(path, arch, 1e-6);
  ASSERT_TRUE(loaded.adam.has_value());
  EXPECT_EQ(loaded.adam->steps(), 2u);
  EXPECT_EQ(flatten(loaded.adam->first_moment()), flatten(adam.first_moment()));
  EXPECT_EQ(flatten(loaded.adam->second_moment()), flatten(adam.second_moment()));

  // Resuming gives the same next step as continuing in memory.
  adam.step(model, grad, 1e-3);
  loaded.adam->step(loaded.model, grad, 1e-3);
  EXPECT_EQ(flatten(loaded.model), flatten(model));
  std::filesystem::remove(path);
}

TEST(ModelIo, DescriptorMismatchRejected) {
  const auto path = temp("graphsc_model_mismatch.bin");
  save_model(path, ScNetModel<float>::initialized(Architecture::micro(16), 1));
  EXPECT_THROW(load_model(path, Architecture::micro(32)), Error);
  Architecture two_blocks = Architecture::micro(16);
  two_blocks.blocks = 2;
  EXPECT_THROW(load_model(path, two_blocks), Error);
  std::filesystem::remove(path);
}

TEST(ModelIo, CorruptFilesRejected) {
  const auto path = temp("graphsc_model_corrupt.bin");
  save_model(path, ScNetModel<float>::initialized(Architecture::micro(), 1));
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 10);
  EXPECT_THROW(load_model(path, Architecture::micro()), Error);
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTAMODELFILE";
  }
  EXPECT_THROW(load_model(path, Architecture::micro()), Error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(path, Architecture::micro()), Error);
}

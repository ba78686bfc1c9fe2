#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "loretta/checkpoint.hpp"
#include "test_support.hpp"

namespace loretta {
namespace {

namespace fs = std::filesystem;

Checkpoint sample_checkpoint(bool with_optimizer) {
  const auto layout = testing_support::tiny_layout();
  Checkpoint ck;
  ck.model = testing_support::tiny_config();
  ck.layout = layout;
  ck.strategy = "c2m3";
  ck.step = 42;
  ck.train = {{"seed", 3}};
  ck.state = {{"loaders", {{1, 2}}}};
  ck.params = init_params<float>(ck.model, 7);
  if (with_optimizer) {
    OptimizerState<float> st(ck.params.data().size());
    Rng rng(1);
    for (auto& v : st.m) v = static_cast<float>(rng.normal());
    for (auto& v : st.v) v = static_cast<float>(rng.uniform());
    st.step = 42;
    ck.optimizer = st;
  }
  return ck;
}

bool bit_equal(const AlignedVector<float>& a, const AlignedVector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

TEST(Container, RoundTripIsBitExact) {
  Container c;
  c.meta = {{"k", "v"}};
  c.tensors.push_back({"a", {2, 2}, DType::kF32, {1.5, -0.0, 3.25, 1e-30}});
  c.tensors.push_back({"b", {3}, DType::kF64, {0.1, -1e300, 5e-324}});
  const auto bytes = c.serialize();
  const auto back = Container::deserialize(bytes);
  EXPECT_EQ(back.meta, c.meta);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_TRUE(std::signbit(back.tensor("a").values[1]));
  EXPECT_EQ(back.tensor("b").values[2], 5e-324);
  EXPECT_THROW(back.tensor("zz"), FormatError);
}

TEST(Container, RejectsMalformed) {
  Container c;
  c.tensors.push_back({"a", {2}, DType::kF32, {1, 2}});
  c.tensors.push_back({"b", {2}, DType::kF32, {3, 4}});
  const auto bytes = c.serialize();
  EXPECT_THROW(Container::deserialize(bytes.substr(0, 4)), FormatError);
  EXPECT_THROW(Container::deserialize(bytes.substr(0, bytes.size() - 1)), FormatError);

  // Point both tensors at the same blob.
  auto header = nlohmann::json::parse(bytes.substr(8, le::get<std::uint64_t>(bytes.data())));
  header["tensors"][1]["offset"] = 0;
  const auto text = header.dump();
  std::string bad;
  le::put<std::uint64_t>(bad, text.size());
  bad += text + bytes.substr(8 + le::get<std::uint64_t>(bytes.data()));
  EXPECT_THROW(Container::deserialize(bad), FormatError);

  std::string garbage;
  le::put<std::uint64_t>(garbage, 5);
  garbage += "{oops";
  EXPECT_THROW(Container::deserialize(garbage), FormatError);

  c.tensors[0].values.push_back(9);
  EXPECT_THROW(c.serialize(), InputError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = testing_support::temp_dir("ckpt");
  for (bool opt : {false, true}) {
    const auto ck = sample_checkpoint(opt);
    ck.save(dir / "a.bin");
    const auto back = Checkpoint::load(dir / "a.bin");
    EXPECT_TRUE(bit_equal(back.params.data(), ck.params.data()));
    EXPECT_EQ(back.model, ck.model);
    EXPECT_EQ(back.layout, ck.layout);
    EXPECT_EQ(back.step, 42);
    EXPECT_EQ(back.state, ck.state);
    ASSERT_EQ(back.optimizer.has_value(), opt);
    if (opt) {
      EXPECT_TRUE(bit_equal(back.optimizer->m, ck.optimizer->m));
      EXPECT_TRUE(bit_equal(back.optimizer->v, ck.optimizer->v));
      EXPECT_EQ(back.optimizer->step, 42);
    }
    back.save(dir / "b.bin");
    EXPECT_EQ(read_file(dir / "a.bin"), read_file(dir / "b.bin"));
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsInconsistentContents) {
  auto c = sample_checkpoint(false).to_container();
  auto wrong_kind = c;
  wrong_kind.meta["kind"] = "other";
  EXPECT_THROW(Checkpoint::from_container(wrong_kind), FormatError);

  auto missing = c;
  missing.tensors.pop_back();
  EXPECT_THROW(Checkpoint::from_container(missing), FormatError);

  auto nan = c;
  nan.tensors[0].values[0] = std::nan("");
  EXPECT_THROW(Checkpoint::from_container(nan), FormatError);

  auto vocab = c;
  vocab.meta["model"]["vocab_total"] = 99;
  EXPECT_THROW(Checkpoint::from_container(vocab), FormatError);

  EXPECT_THROW(Checkpoint::load("/nonexistent/ckpt.bin"), FormatError);
}

}  // namespace
}  // namespace loretta

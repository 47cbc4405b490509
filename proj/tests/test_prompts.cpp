#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "dempt/prompts.hpp"

using namespace dempt;

TEST_CASE("materialize with a zero transfer input reduces to the broadcast type embedding") {
  auto bank = PromptBank<double>::init(2, 2, 4, 3, 5);
  std::fill(bank.transfer_in.mutable_data().begin(), bank.transfer_in.mutable_data().end(), 0.0);
  auto p = bank.materialize(PhaseId::IntraContext);
  CHECK(p.rows() == 2 * 2 * 2);
  CHECK(p.cols() == 4);
  auto emb = bank.type_emb.data();
  for (int r = 0; r < p.rows(); ++r)
    for (int c = 0; c < 4; ++c) CHECK(p.data()[r * 4 + c] == doctest::Approx(emb[4 + c]).epsilon(1e-12));
}

TEST_CASE("hand evaluation at d=1: 2*tanh(0.5) + 0.1") {
  auto bank = PromptBank<double>::init(1, 1, 1, 3, 1);
  bank.raw[0].mutable_data()[0] = 0.5;
  bank.raw[0].mutable_data()[1] = 0.5;
  bank.transfer_in.mutable_data()[0] = 1.0;
  bank.transfer_out.mutable_data()[0] = 2.0;
  bank.type_emb.mutable_data()[0] = 0.1;
  auto p = bank.materialize(0);
  double expected = 2.0 * std::tanh(0.5) + 0.1;  // = 1.0242343...
  CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(p.data()[0] == doctest::Approx(1.02423).epsilon(1e-4));
}

TEST_CASE("equal raw prompts across phases differ by exactly the type-embedding difference") {
  auto bank = PromptBank<double>::init(2, 3, 4, 3, 9);
  bank.raw[1] = Tensor<double>::param(bank.raw[0].shape(), {bank.raw[0].data().begin(), bank.raw[0].data().end()});
  auto pc = bank.materialize(0);
  auto ps = bank.materialize(1);
  auto emb = bank.type_emb.data();
  for (int r = 0; r < pc.rows(); ++r)
    for (int c = 0; c < 4; ++c) {
      double diff = ps.data()[r * 4 + c] - pc.data()[r * 4 + c];
      CHECK(diff == doctest::Approx(emb[4 + c] - emb[c]).epsilon(1e-9));
    }
}

TEST_CASE("split_kv: q=1 sends row 0 to keys, row 1 to values; halves rebuild the layer") {
  auto bank = PromptBank<double>::init(3, 1, 4, 3, 13);
  auto p = bank.materialize(2);
  for (int l = 0; l < 3; ++l) {
    auto [k, v] = split_kv(p, l, 1);
    CHECK(k.rows() == 1);
    CHECK(v.rows() == 1);
    CHECK(k.rows() + v.rows() == 2);
    auto joined = concat_rows<double>({k, v});
    for (int i = 0; i < 2 * 4; ++i) CHECK(joined.data()[i] == p.data()[l * 2 * 4 + i]);
  }
  CHECK_THROWS_AS(split_kv(p, 3, 1), std::runtime_error);
}

TEST_CASE("ablation flags: no transfer leaves raw + embedding; no type embedding leaves transfer only") {
  auto no_transfer = PromptBank<double>::init(1, 2, 3, 3, 17, /*use_transfer=*/false, true);
  auto p1 = no_transfer.materialize(0);
  for (int r = 0; r < p1.rows(); ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(p1.data()[r * 3 + c] ==
            doctest::Approx(no_transfer.raw[0].data()[r * 3 + c] + no_transfer.type_emb.data()[c]).epsilon(1e-12));

  auto no_type = PromptBank<double>::init(1, 2, 3, 3, 17, true, /*use_type_embedding=*/false);
  CHECK_FALSE(no_type.type_emb.defined());
  auto p2 = no_type.materialize(0);
  auto manual = matmul(tanh_op(matmul(no_type.raw[0], no_type.transfer_in)), no_type.transfer_out);
  for (int64_t i = 0; i < p2.size(); ++i) CHECK(p2.data()[i] == manual.data()[i]);
}

TEST_CASE("baking freezes prompts with identical numerics; baked inference is reproducible") {
  auto bank = PromptBank<float>::init(2, 3, 8, 3, 21);
  auto baked = BakedPrompts<float>::bake(bank);
  REQUIRE(baked.prompts.size() == 3);
  for (int r = 0; r < 3; ++r) {
    NoGradGuard ng;
    auto fresh = bank.materialize(r);
    REQUIRE(fresh.size() == baked.prompts[static_cast<size_t>(r)].size());
    for (int64_t i = 0; i < fresh.size(); ++i)
      CHECK(fresh.data()[i] == baked.prompts[static_cast<size_t>(r)].data()[i]);
    CHECK_FALSE(baked.prompts[static_cast<size_t>(r)].requires_grad());
  }
  // baking the bake is a fixed point
  auto again = BakedPrompts<float>::bake(bank);
  for (int r = 0; r < 3; ++r)
    for (int64_t i = 0; i < again.prompts[r].size(); ++i)
      CHECK(again.prompts[static_cast<size_t>(r)].data()[i] == baked.prompts[static_cast<size_t>(r)].data()[i]);
}

TEST_CASE("materialization is differentiable: finite differences over all bank parameters") {
  auto bank = PromptBank<double>::init(1, 2, 4, 3, 25);
  std::vector<Tensor<double>> params;
  for (int r = 0; r < 3; ++r) params.push_back(bank.raw[r]);
  params.push_back(bank.transfer_in);
  params.push_back(bank.transfer_out);
  params.push_back(bank.type_emb);
  auto loss_fn = [&]() {
    auto p = concat_rows<double>({bank.materialize(0), bank.materialize(1), bank.materialize(2)});
    return mean_all(mul(p, p));
  };
  CHECK(grad_check<double>(loss_fn, params, 1e-5) < 1e-6);
}

TEST_CASE("single-phase banks carry one prompt") {
  auto bank = PromptBank<float>::init(2, 4, 8, 1, 31);
  CHECK(bank.raw.size() == 1);
  CHECK(bank.type_emb.rows() == 1);
  CHECK_THROWS_AS(bank.materialize(1), std::runtime_error);
}

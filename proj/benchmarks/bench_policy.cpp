#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "veritune/objective.hpp"
#include "veritune/policy.hpp"
#include "veritune/tokenizer.hpp"

using namespace veritune;

namespace {

Policy make_policy() { return Policy(PolicyConfig{}, CharTokenizer::standard(), 11); }

std::vector<int> ids(const Policy& p, const std::string& text, bool prompt) {
  return prompt ? p.tokenizer().encode_prompt(text) : p.tokenizer().encode_completion(text);
}

const char* kPrompt =
    "CLAIM: The Riverton Library opened in 1921.\n"
    "EVIDENCE:\n"
    "- Municipal records state that the Riverton Library opened in 1921.\n"
    "QUESTION: Does the evidence contradict the claim? Answer Yes or No.\n"
    "ANSWER:\n";
const char* kChosen =
    "Checking the record against the claim, the evidence restates the same fact, so there is no "
    "contradiction here. Answer: No.";
const char* kRejected =
    "Reading the line closely, the evidence plainly contradicts the claim on the stated fact. "
    "Answer: Yes.";

void BM_PairForward(benchmark::State& state) {
  const Policy p = make_policy();
  const auto prompt = ids(p, kPrompt, true);
  const auto chosen = ids(p, kChosen, false);
  const auto rejected = ids(p, kRejected, false);
  for (auto _ : state) {
    auto fwd = p.forward_pair(prompt, chosen, rejected);
    benchmark::DoNotOptimize(fwd.lp_chosen);
  }
}
BENCHMARK(BM_PairForward);

void BM_PairForwardBackward(benchmark::State& state) {
  Policy p = make_policy();
  const auto prompt = ids(p, kPrompt, true);
  const auto chosen = ids(p, kChosen, false);
  const auto rejected = ids(p, kRejected, false);
  for (auto _ : state) {
    auto fwd = p.forward_pair(prompt, chosen, rejected);
    p.backward_pair(*fwd.trace, 1.0, -1.0);
    benchmark::DoNotOptimize(fwd.lp_chosen);
    p.zero_grads();
  }
}
BENCHMARK(BM_PairForwardBackward);

void BM_LogprobOnly(benchmark::State& state) {
  const Policy p = make_policy();
  const auto prompt = ids(p, kPrompt, true);
  const auto chosen = ids(p, kChosen, false);
  for (auto _ : state) {
    benchmark::DoNotOptimize(p.logprob(prompt, chosen));
  }
}
BENCHMARK(BM_LogprobOnly);

void BM_GreedyDecode64(benchmark::State& state) {
  const Policy p = make_policy();
  const auto prompt = ids(p, kPrompt, true);
  Rng rng(3);
  for (auto _ : state) {
    auto out = p.sample(prompt, 64, 0.0, rng);
    benchmark::DoNotOptimize(out.size());
  }
}
BENCHMARK(BM_GreedyDecode64);

void BM_VariantLoss(benchmark::State& state) {
  PairQuantities q{-41.0, -54.0, -40.0, -50.0};
  Hyperparams hp;
  Multipliers mu{1.0, 1.0};
  for (auto _ : state) {
    auto bd = variant_loss(Variant::Improved, q, hp, mu);
    benchmark::DoNotOptimize(bd.loss);
  }
}
BENCHMARK(BM_VariantLoss);

}  // namespace

BENCHMARK_MAIN();

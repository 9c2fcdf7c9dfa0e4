#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <veritune/io.hpp>
#include <veritune/tokenizer.hpp>

using namespace veritune;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "veritune-io-tests";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ClaimRecord sample_record() {
  ClaimRecord r;
  r.id = "syn7-00001";
  r.claim = "The library in Arden was built in 1952.";
  r.evidence = {"The library in Arden was built in 1910.", "Arden lies on a river."};
  r.label = Label::Refutes;
  r.tags = {"synthetic", "numeric-edit"};
  r.counterfactual = true;
  r.tips = "the year was altered";
  r.split = Split::Validation;
  return r;
}

}  // namespace

TEST_SUITE_BEGIN("tokenizer_io");

TEST_CASE("standard tokenizer round-trips its whole alphabet") {
  const CharTokenizer tok = CharTokenizer::standard();
  CHECK(tok.vocab_size() == 84);
  CHECK(tok.bos_id() == 0);
  CHECK(tok.eos_id() == 1);

  const std::string& alpha = tok.alphabet();
  CHECK(tok.decode(tok.encode(alpha)) == alpha);

  const auto ids = tok.encode("Yes, it was.");
  for (int id : ids) {
    CHECK(id >= 2);
    CHECK(id < tok.vocab_size());
  }
}

TEST_CASE("prompt and completion forms add the markers") {
  const CharTokenizer tok = CharTokenizer::standard();
  const auto p = tok.encode_prompt("Q");
  REQUIRE(p.size() == 2);
  CHECK(p[0] == tok.bos_id());

  const auto c = tok.encode_completion("A");
  REQUIRE(c.size() == 2);
  CHECK(c[1] == tok.eos_id());

  // decode drops the specials, so both forms invert cleanly
  CHECK(tok.decode(p) == "Q");
  CHECK(tok.decode(c) == "A");
}

TEST_CASE("characters outside the alphabet are rejected") {
  const CharTokenizer tok = CharTokenizer::standard();
  CHECK_THROWS_AS((void)tok.encode("caf\xc3\xa9"), DataError);
  CHECK(!tok.in_vocab('\t'));
  CHECK(tok.in_vocab(' '));
}

TEST_CASE("claims round-trip byte-stably with extras preserved") {
  const fs::path p1 = temp_dir() / "claims_a.jsonl";
  const fs::path p2 = temp_dir() / "claims_b.jsonl";

  ClaimRecord r = sample_record();
  ClaimRecord plain;
  plain.id = "syn7-00002";
  plain.claim = "The museum in Bly holds 40 rooms.";
  plain.evidence = {"The museum in Bly holds 40 rooms."};
  plain.label = Label::Supports;
  save_claims(p1, {r, plain});

  auto loaded = load_claims(p1);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == r.id);
  CHECK(loaded[0].label == Label::Refutes);
  CHECK(loaded[0].tips.value() == "the year was altered");
  CHECK(loaded[0].split == Split::Validation);
  CHECK(loaded[0].tags == r.tags);
  CHECK(loaded[1].counterfactual == false);
  CHECK(!loaded[1].tips.has_value());

  save_claims(p2, loaded);
  CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("unknown claim fields survive a round trip") {
  const std::string line =
      R"({"id":"x1","claim":"c","evidence":["e"],"label":"supports",)"
      R"("source_url":"http://example.org","rank":3})";
  ClaimRecord rec = claim_from_json_line(line);
  CHECK(rec.extras.find("source_url") != std::string::npos);

  const std::string out = claim_to_json_line(rec);
  CHECK(out.find("source_url") != std::string::npos);
  CHECK(out.find("\"rank\":3") != std::string::npos);

  // and the emitted line parses back to the same record
  ClaimRecord again = claim_from_json_line(out);
  CHECK(again.extras == rec.extras);
  CHECK(claim_to_json_line(again) == out);
}

TEST_CASE("claim parse errors name the offending part") {
  CHECK_THROWS_AS((void)claim_from_json_line("{"), DataError);
  CHECK_THROWS_AS((void)claim_from_json_line(R"({"id":"a","claim":"c"})"), DataError);
  CHECK_THROWS_AS(
      (void)claim_from_json_line(R"({"id":"a","claim":"c","evidence":[],"label":"supports"})"),
      DataError);
  CHECK_THROWS_AS(
      (void)claim_from_json_line(R"({"id":"a","claim":"c","evidence":["e"],"label":"maybe"})"),
      DataError);

  const fs::path bad = temp_dir() / "bad.jsonl";
  std::ofstream(bad) << R"({"id":"a","claim":"c","evidence":["e"],"label":"supports"})" << "\n"
                     << "not json\n";
  try {
    (void)load_claims(bad);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    // errors carry file:line so a bad row in a big corpus is findable
    CHECK(msg.find(bad.filename().string() + ":2") != std::string::npos);
  }
}

TEST_CASE("loading a missing file raises DataError") {
  CHECK_THROWS_AS((void)load_claims(temp_dir() / "absent.jsonl"), DataError);
  CHECK_THROWS_AS((void)load_generations(temp_dir() / "absent.jsonl"), DataError);
  CHECK_THROWS_AS((void)load_pairs(temp_dir() / "absent.jsonl"), DataError);
}

TEST_CASE("generations round-trip") {
  const fs::path p1 = temp_dir() / "gen_a.jsonl";
  const fs::path p2 = temp_dir() / "gen_b.jsonl";
  GenerationSample s1{"r1", SettingId::Bare, 0, "Yes, it contradicts.", Label::Refutes, true};
  GenerationSample s2{"r1", SettingId::GivenNo, 1, "mumble", std::nullopt, false};
  save_generations(p1, {s1, s2});
  auto loaded = load_generations(p1);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].setting == SettingId::Bare);
  CHECK(loaded[0].parsed_label == Label::Refutes);
  CHECK(loaded[0].valid);
  CHECK(loaded[1].setting == SettingId::GivenNo);
  CHECK(!loaded[1].parsed_label.has_value());
  CHECK(!loaded[1].valid);
  save_generations(p2, loaded);
  CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("pairs round-trip") {
  const fs::path p1 = temp_dir() / "pairs_a.jsonl";
  const fs::path p2 = temp_dir() / "pairs_b.jsonl";
  PreferencePair pr;
  pr.record_id = "r9";
  pr.prompt = "CLAIM: x\nANSWER:\n";
  pr.chosen = "Yes, contradiction.";
  pr.rejected = "No, agreement.";
  pr.w = 4;
  pr.k = 10;
  pr.chosen_setting = SettingId::GivenYes;
  pr.rejected_setting = SettingId::Bare;
  save_pairs(p1, {pr});
  auto loaded = load_pairs(p1);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].record_id == "r9");
  CHECK(loaded[0].w == 4);
  CHECK(loaded[0].chosen_setting == SettingId::GivenYes);
  save_pairs(p2, loaded);
  CHECK(slurp(p1) == slurp(p2));
}

TEST_SUITE_END();

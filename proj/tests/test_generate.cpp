#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "storylab/generate.hpp"
#include "storylab/train.hpp"
// After the project headers: httplib's system includes define macros that clash with Eigen.
#include "httplib.h"
#include "json.hpp"

using namespace storylab;

namespace {

ModelConfig gen_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_kv_heads = 2;
  c.d_model = 32;
  c.d_mlp = 64;
  c.vocab_size = Tokenizer::kBaseVocab;
  c.context_length = 32;
  return c;
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

std::vector<PromptCase> two_cases() {
  return {{"c1", "Once upon a time there was a ***", "test"}, {"c2", "The dog ran to the ***", "test"}};
}

// Local chat endpoint whose replies are scripted per call.
struct StubServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> calls{0};
  std::vector<int> statuses;  // status per call; 200 after the list runs out
  std::string last_body, last_auth;
  std::mutex mu;

  StubServer() {
    server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int i = calls++;
      {
        std::lock_guard lock(mu);
        last_body = req.body;
        last_auth = req.get_header_value("Authorization");
      }
      const int status = i < static_cast<int>(statuses.size()) ? statuses[i] : 200;
      res.status = status;
      if (status == 200) {
        nlohmann::json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", "grammar: 8 creativity: 7 consistency: 9"}}}}}}};
        res.set_content(reply.dump(), "application/json");
      } else {
        res.set_content("{\"error\": \"scripted\"}", "application/json");
      }
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~StubServer() {
    server.stop();
    thread.join();
  }
  HttpClientConfig config() const {
    HttpClientConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port);
    c.model = "judge-model";
    c.token_env = "STORYLAB_TEST_TOKEN";
    c.timeout_seconds = 5;
    c.backoff = std::chrono::milliseconds(1);
    return c;
  }
};

}  // namespace

TEST(PromptCase, MarkerContract) {
  EXPECT_NO_THROW((PromptCase{"a", "The cat ***", ""}.validate()));
  EXPECT_NO_THROW((PromptCase{"a", "The cat *** \n", ""}.validate()));
  EXPECT_THROW((PromptCase{"a", "The cat", ""}.validate()), ContractError);
  EXPECT_THROW((PromptCase{"a", "The *** cat ***", ""}.validate()), ContractError);
  EXPECT_THROW((PromptCase{"a", "The *** cat", ""}.validate()), ContractError);
  EXPECT_EQ(strip_marker("The cat ***"), "The cat");
}

TEST(Sample, GreedyAndSeededDeterminism) {
  auto m = init_weights<float>(gen_model(), 1);
  Tokenizer tok;
  const SampleOptions greedy{0.0, 20, 1};
  EXPECT_EQ(sample(m, tok, "hello ***", greedy), sample(m, tok, "hello ***", SampleOptions{0.0, 20, 99}));
  const SampleOptions hot{1.0, 20, 5};
  EXPECT_EQ(sample(m, tok, "hello ***", hot), sample(m, tok, "hello ***", hot));
  EXPECT_NE(sample(m, tok, "hello ***", hot), sample(m, tok, "hello ***", SampleOptions{1.0, 20, 6}));
}

TEST(Sample, MarkerStrippedBeforeEncoding) {
  auto m = init_weights<float>(gen_model(), 2);
  Tokenizer tok;
  const SampleOptions greedy{0.0, 10, 0};
  EXPECT_EQ(sample(m, tok, "abc ***", greedy), sample(m, tok, "abc", greedy));
}

TEST(Sample, PromptLongerThanContextIsContractError) {
  auto m = init_weights<float>(gen_model(), 1);
  Tokenizer tok;
  EXPECT_THROW(sample(m, tok, std::string(40, 'a') + " ***"), ContractError);
  EXPECT_THROW(sample(m, tok, "a ***", SampleOptions{-1.0, 5, 0}), ContractError);
}

TEST(Sample, GreedyReproducesMemorizedSentence) {
  Tokenizer tok;
  const std::string sentence = "the cat sat on the mat.";
  std::vector<std::vector<TokenId>> docs(300, tok.encode(sentence));
  auto data = pack_contexts(docs, 33, 1, Tokenizer::kBaseVocab);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.batch_size_tokens = 33 * 8;
  cfg.epochs = 4;
  cfg.eval_every = 1000;
  cfg.weight_decay = 0.0;
  auto r = train(init_weights<float>(gen_model(), 4), data, cfg);
  EXPECT_EQ(sample(r.checkpoint.weights, tok, "the cat sat ***", SampleOptions{0.0, 40, 0}), " on the mat.");
}

TEST(JudgePrompt, TemplateProperties) {
  const PromptCase c{"x", "The bird flew over the ***", ""};
  const auto a = build_judge_prompt(c, " hill and sang.");
  EXPECT_EQ(a, build_judge_prompt(c, " hill and sang."));
  const auto schema_at = a.rfind("grammar:");
  ASSERT_NE(schema_at, std::string::npos);
  const auto schema = a.substr(schema_at);
  for (const char* metric : {"grammar", "creativity", "consistency"}) EXPECT_EQ(count_of(schema, metric), 1u) << metric;
  EXPECT_NE(a.find("unfinished sentence"), std::string::npos);
  EXPECT_NE(a.find("The bird flew over the"), std::string::npos);
  EXPECT_NE(a.find(" hill and sang."), std::string::npos);
}

TEST(JudgeParser, RoundTripsSyntheticReply) {
  const auto req = build_judge_prompt(PromptCase{"x", "A ***", ""}, "b");
  std::string reply = "Nice try.\n" + req.substr(req.rfind("grammar:"));
  reply.replace(reply.find("<0-10>"), 6, "4");
  reply.replace(reply.find("<0-10>"), 6, "10");
  reply.replace(reply.find("<0-10>"), 6, "0");
  const auto s = parse_judge_reply(reply);
  EXPECT_EQ(s.grammar, 4);
  EXPECT_EQ(s.creativity, 10);
  EXPECT_EQ(s.consistency, 0);
  EXPECT_EQ(s.raw, reply);
}

TEST(JudgeParser, Contract) {
  const auto s = parse_judge_reply("grammar: 7 creativity: 6 consistency: 8");
  EXPECT_EQ(s.grammar, 7);
  EXPECT_EQ(s.creativity, 6);
  EXPECT_EQ(s.consistency, 8);
  EXPECT_EQ(parse_judge_reply("Grammar=3\nCreativity = 2\nCONSISTENCY: 1").consistency, 1);
  EXPECT_THROW(parse_judge_reply("grammar: 11 creativity: 6 consistency: 8"), ScoringError);
  EXPECT_THROW(parse_judge_reply("grammar: 7.5 creativity: 6 consistency: 8"), ScoringError);
  EXPECT_THROW(parse_judge_reply("grammar: -1 creativity: 6 consistency: 8"), ScoringError);
  EXPECT_THROW(parse_judge_reply("grammar: 7 creativity: 6"), ScoringError);
  EXPECT_THROW(parse_judge_reply("looks fine"), ScoringError);
}

TEST(Judge, UnparsableRepliesBecomeRowErrors) {
  MockChatClient client({"grammar: 11 creativity: 1 consistency: 1"});
  EXPECT_THROW(judge(client, "req"), ScoringError);
  EXPECT_EQ(client.calls(), 3u);
}

TEST(EvaluateModel, MeansMatchHandArithmetic) {
  std::vector<EvalRow> rows;
  for (const char* id : {"c1", "c2"})
    for (std::size_t j = 0; j < 2; ++j) rows.push_back(EvalRow{id, j, j, "text", std::nullopt, ""});
  MockChatClient client({"grammar: 5 creativity: 5 consistency: 5", "grammar: 7 creativity: 9 consistency: 7",
                         "grammar: 6 creativity: 6 consistency: 6", "grammar: 6 creativity: 6 consistency: 6"});
  auto report = judge_completions(rows, two_cases(), client, EvalConfig{}, "m");
  EXPECT_EQ(report.means.grammar, 6.0);
  EXPECT_EQ(report.means.creativity, 6.5);
  EXPECT_EQ(report.means.consistency, 6.0);
  EXPECT_EQ(report.means.scored, 4u);
  EXPECT_EQ(report.rows[1].score->creativity, 9);
}

TEST(EvaluateModel, TwoRowsPerCaseAndDeterministic) {
  auto m = init_weights<float>(gen_model(), 3);
  Tokenizer tok;
  EvalConfig cfg;
  cfg.max_new_tokens = 12;
  cfg.seed = 5;
  MockChatClient a({"grammar: 3 creativity: 4 consistency: 5", "bad reply", "bad", "bad",
                    "grammar: 9 creativity: 9 consistency: 9"});
  MockChatClient b({"grammar: 3 creativity: 4 consistency: 5", "bad reply", "bad", "bad",
                    "grammar: 9 creativity: 9 consistency: 9"});
  auto ra = evaluate_model(m, tok, two_cases(), a, cfg, "tiny");
  auto rb = evaluate_model(m, tok, two_cases(), b, cfg, "tiny");
  ASSERT_EQ(ra.rows.size(), 4u);
  EXPECT_NE(ra.rows[0].seed, ra.rows[1].seed);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ra.rows[i].completion, rb.rows[i].completion);
    EXPECT_EQ(ra.rows[i].score.has_value(), rb.rows[i].score.has_value());
  }
  // Row 1 exhausts its three attempts on unparsable replies.
  EXPECT_FALSE(ra.rows[1].score.has_value());
  EXPECT_EQ(ra.means.errors, 1u);
  EXPECT_EQ(ra.means.scored, 3u);
  for (const auto& r : ra.rows)
    if (r.score) {
      for (int v : {r.score->grammar, r.score->creativity, r.score->consistency}) {
        EXPECT_GE(v, 0);
        EXPECT_LE(v, 10);
      }
    }
  const auto back = parse_report(report_jsonl(ra));
  EXPECT_EQ(back.rows.size(), 4u);
  EXPECT_EQ(back.means.grammar, ra.means.grammar);
  EXPECT_EQ(back.template_version, std::string(kJudgeTemplateVersion));
}

TEST(EvaluateModel, MeansArePermutationInvariant) {
  std::vector<EvalRow> rows;
  for (int i = 0; i < 6; ++i) rows.push_back(EvalRow{"c", 0, 0, "", JudgeScore{i, 10 - i, i % 3, ""}, ""});
  const auto a = compute_means(rows);
  std::reverse(rows.begin(), rows.end());
  const auto b = compute_means(rows);
  EXPECT_EQ(a.grammar, b.grammar);
  EXPECT_EQ(a.creativity, b.creativity);
  EXPECT_EQ(a.consistency, b.consistency);
}

TEST(HttpChatClient, WireFormatAgainstStub) {
  StubServer stub;
  setenv("STORYLAB_TEST_TOKEN", "secret-token", 1);
  HttpChatClient client(stub.config());
  const auto reply = client.complete(ChatRequest{"sys", "hello", 0.5, 64});
  EXPECT_EQ(reply, "grammar: 8 creativity: 7 consistency: 9");
  EXPECT_EQ(stub.last_auth, "Bearer secret-token");
  const auto body = nlohmann::json::parse(stub.last_body);
  EXPECT_EQ(body["model"], "judge-model");
  EXPECT_EQ(body["messages"][0]["role"], "system");
  EXPECT_EQ(body["messages"][0]["content"], "sys");
  EXPECT_EQ(body["messages"][1]["role"], "user");
  EXPECT_EQ(body["messages"][1]["content"], "hello");
  EXPECT_EQ(body["temperature"], 0.5);
  EXPECT_EQ(body["max_tokens"], 64);
  const auto s = judge(client, "req");
  EXPECT_EQ(s.consistency, 9);
  unsetenv("STORYLAB_TEST_TOKEN");
}

TEST(HttpChatClient, RetriesTransientFailures) {
  StubServer stub;
  stub.statuses = {500, 503};
  HttpChatClient client(stub.config());
  EXPECT_EQ(client.complete(ChatRequest{"", "x"}), "grammar: 8 creativity: 7 consistency: 9");
  EXPECT_EQ(stub.calls.load(), 3);
}

TEST(HttpChatClient, GivesUpAfterThreeAttempts) {
  StubServer stub;
  stub.statuses = {500, 500, 500, 500};
  HttpChatClient client(stub.config());
  EXPECT_THROW(client.complete(ChatRequest{"", "x"}), TransportError);
  EXPECT_EQ(stub.calls.load(), 3);
}

TEST(HttpChatClient, AuthenticationFailureIsFatal) {
  StubServer stub;
  stub.statuses = {401};
  HttpChatClient client(stub.config());
  EXPECT_THROW(client.complete(ChatRequest{"", "x"}), ConfigError);
  EXPECT_EQ(stub.calls.load(), 1);

  // Fatal errors abort evaluation instead of becoming row errors.
  StubServer stub2;
  stub2.statuses = {403, 403, 403, 403, 403, 403, 403, 403};
  HttpChatClient client2(stub2.config());
  std::vector<EvalRow> rows{EvalRow{"c1", 0, 0, "t", std::nullopt, ""}};
  EXPECT_THROW(judge_completions(rows, two_cases(), client2, EvalConfig{}, "m"), ConfigError);
}

TEST(HttpChatClient, UnreachableEndpointIsTransportError) {
  HttpClientConfig c;
  c.base_url = "http://127.0.0.1:1";
  c.backoff = std::chrono::milliseconds(1);
  c.timeout_seconds = 1;
  HttpChatClient client(c);
  EXPECT_THROW(client.complete(ChatRequest{"", "x"}), TransportError);
}

TEST(MockChatClient, EchoAndFile) {
  MockChatClient echo;
  EXPECT_EQ(echo.complete(ChatRequest{"", "same text"}), "same text");
  const auto p = std::filesystem::temp_directory_path() / "storylab_mock_replies.jsonl";
  std::ofstream(p) << "\"grammar: 1 creativity: 2 consistency: 3\"\n\n{\"reply\": \"two\"}\n";
  auto m = MockChatClient::from_file(p);
  EXPECT_EQ(m->complete({}), "grammar: 1 creativity: 2 consistency: 3");
  EXPECT_EQ(m->complete({}), "two");
  EXPECT_EQ(m->complete({}), "grammar: 1 creativity: 2 consistency: 3");
}

TEST(RunBounded, RunsEveryTaskOnceAndPropagatesErrors) {
  std::vector<std::atomic<int>> hits(50);
  run_bounded(50, 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(run_bounded(10, 3, [](std::size_t i) { if (i == 4) throw DataError("boom"); }), DataError);
}

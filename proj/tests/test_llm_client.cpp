#include <gtest/gtest.h>

#include <atomic>
#include <sstream>
#include <thread>

#include "httplib.h"

#include "adaptrec/llm_client.hpp"
#include "support/fixtures.hpp"

using namespace adaptrec;

namespace {

/// Local chat-completions endpoint with a programmable status sequence.
class FakeEndpoint {
public:
  FakeEndpoint() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int call = calls_.fetch_add(1);
      const int now = ++in_flight_;
      int seen = peak_.load();
      while (now > seen && !peak_.compare_exchange_weak(seen, now)) {
      }
      if (delay_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));
      --in_flight_;
      last_auth_ = req.get_header_value("Authorization");
      const int status = call < static_cast<int>(statuses_.size()) ? statuses_[call] : 200;
      res.status = status;
      if (status == 200) {
        const auto body = json::parse(req.body);
        const std::string prompt = body["messages"][0]["content"];
        res.set_content(json{{"choices", {{{"message", {{"role", "assistant"}, {"content", "echo:" + prompt}}}}}}}.dump(),
                        "application/json");
      } else {
        res.set_content("{\"error\":\"status " + std::to_string(status) + "\"}", "application/json");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }

  EndpointConfig config() const {
    EndpointConfig c;
    c.url = "http://127.0.0.1:" + std::to_string(port_) + "/v1";
    c.model = "test-model";
    c.auth_env = "ADAPTREC_TEST_TOKEN";
    c.timeout_s = 5;
    c.backoff_ms = 1;
    return c;
  }

  std::vector<int> statuses_;
  int delay_ms_ = 0;
  std::atomic<int> calls_{0}, in_flight_{0}, peak_{0};
  std::string last_auth_;

private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

CandidateSet candidates_of(const SequenceCorpus& c, std::vector<ItemId> order) {
  CandidateSet s;
  s.user = "1";
  s.ground_truth = order.front();
  s.order = std::move(order);
  s.negatives.assign(s.order.begin() + 1, s.order.end());
  (void)c;
  return s;
}

CompletionRequest request(std::string prompt, std::string id) {
  CompletionRequest r;
  r.prompt = std::move(prompt);
  r.request_id = std::move(id);
  return r;
}

}  // namespace

TEST(Scripted, ReturnsQueueInOrder) {
  ScriptedBackend b{"A", "B"};
  EXPECT_EQ(b.complete(request("p", "1")).text, "A");
  EXPECT_EQ(b.complete(request("p", "2")).text, "B");
  EXPECT_THROW(b.complete(request("p", "3")), Error);
}

TEST(Scripted, InjectedFailureIsTransportError) {
  ScriptedBackend b(std::vector<ScriptedBackend::Entry>{ScriptedFailure{}, std::string("ok")});
  EXPECT_THROW(b.complete(request("p", "1")), TransportError);
  EXPECT_EQ(b.complete(request("p", "2")).text, "ok");
}

TEST(Http, RetriesThrough429) {
  FakeEndpoint ep;
  ep.statuses_ = {429, 429, 200};
  HttpCompletionBackend b(ep.config());
  const auto res = b.complete(request("hello", "r1"));
  EXPECT_EQ(res.text, "echo:hello");
  EXPECT_EQ(res.attempts, 3);
  EXPECT_EQ(ep.calls_.load(), 3);
}

TEST(Http, AttemptsReachTheTranscript) {
  FakeEndpoint ep;
  ep.statuses_ = {503, 200};
  HttpCompletionBackend b(ep.config());
  TranscriptLog log;
  complete(b, request("hello", "r1"), &log);
  ASSERT_EQ(log.records().size(), 1u);
  EXPECT_EQ(log.records()[0].attempt_count, 2);
  EXPECT_EQ(log.records()[0].prompt_hash, prompt_hash("hello"));
}

TEST(Http, ClientErrorIsNotRetried) {
  FakeEndpoint ep;
  ep.statuses_ = {400};
  HttpCompletionBackend b(ep.config());
  try {
    b.complete(request("x", "r"));
    FAIL();
  } catch (const HttpStatusError& e) {
    EXPECT_EQ(e.status(), 400);
    EXPECT_EQ(e.attempts(), 1);
  }
  EXPECT_EQ(ep.calls_.load(), 1);
}

TEST(Http, ExhaustedRetriesReportStatus) {
  FakeEndpoint ep;
  ep.statuses_ = {500, 500, 500, 500};
  HttpCompletionBackend b(ep.config());
  try {
    b.complete(request("x", "r"));
    FAIL();
  } catch (const HttpStatusError& e) {
    EXPECT_EQ(e.status(), 500);
    EXPECT_EQ(e.attempts(), 4);
  }
}

TEST(Http, TimeoutIsTransportError) {
  FakeEndpoint ep;
  ep.delay_ms_ = 600;
  auto cfg = ep.config();
  cfg.timeout_s = 0.1;
  cfg.max_attempts = 2;
  HttpCompletionBackend b(cfg);
  try {
    b.complete(request("x", "r"));
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts(), 2);
  }
}

TEST(Http, SendsBearerToken) {
  FakeEndpoint ep;
  ::setenv("ADAPTREC_TEST_TOKEN", "sekrit", 1);
  HttpCompletionBackend b(ep.config());
  b.complete(request("x", "r"));
  EXPECT_EQ(ep.last_auth_, "Bearer sekrit");
  ::unsetenv("ADAPTREC_TEST_TOKEN");
}

TEST(Http, InFlightBoundHolds) {
  FakeEndpoint ep;
  ep.delay_ms_ = 30;
  auto cfg = ep.config();
  cfg.max_in_flight = 2;
  HttpCompletionBackend b(cfg);
  {
    std::vector<std::jthread> workers;
    for (int i = 0; i < 8; ++i) workers.emplace_back([&, i] { b.complete(request("x", std::to_string(i))); });
  }
  EXPECT_EQ(ep.calls_.load(), 8);
  EXPECT_LE(ep.peak_.load(), 2);
}

TEST(Http, ConfigValidation) {
  EndpointConfig c;
  c.url = "http://localhost:1/v1";
  c.timeout_s = 0.05;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(HttpCompletionBackend{c}, ConfigError);
  c.timeout_s = 1;
  c.url = "localhost:1";
  EXPECT_THROW(c.validate(), ConfigError);
  c.url = "https://example.invalid/v1";
  EXPECT_NO_THROW(c.validate());
}

TEST(Transcript, ReplayAnswersByRequestId) {
  ScriptedBackend live(std::vector<ScriptedBackend::Entry>{std::string("first"), ScriptedFailure{"boom"},
                                                           std::string("third")});
  std::ostringstream file;
  TranscriptLog log;
  complete(live, request("p1", "a"), &log);
  EXPECT_THROW(complete(live, request("p2", "b"), &log), TransportError);
  complete(live, request("p3", "c"), &log);
  for (const auto& r : log.records()) file << to_json(r).dump() << "\n";

  std::istringstream in(file.str());
  ReplayBackend replay(read_transcript(in));
  EXPECT_EQ(replay.complete(request("p3", "c")).text, "third");
  EXPECT_EQ(replay.complete(request("p1", "a")).text, "first");
  EXPECT_THROW(replay.complete(request("p2", "b")), TransportError);
  EXPECT_THROW(replay.complete(request("changed", "a")), Error);
  EXPECT_THROW(replay.complete(request("p1", "zzz")), Error);
}

TEST(Transcript, StatusFailuresReplayAsStatusFailures) {
  FakeEndpoint ep;
  ep.statuses_ = {404};
  HttpCompletionBackend b(ep.config());
  TranscriptLog log;
  EXPECT_THROW(complete(b, request("p", "a"), &log), HttpStatusError);
  ReplayBackend replay(log.records());
  EXPECT_THROW(replay.complete(request("p", "a")), HttpStatusError);
}

TEST(Transcript, FileIsAppendedOneRecordPerLine) {
  const auto path = std::filesystem::temp_directory_path() / "adaptrec_transcript_test.jsonl";
  std::filesystem::remove(path);
  {
    TranscriptLog log(path.string());
    ScriptedBackend b{"x", "y"};
    complete(b, request("p", "1"), &log);
    complete(b, request("q", "2"), &log);
  }
  std::istringstream in(adaptrec::testing::read_file(path));
  const auto recs = read_transcript(in);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[1].response_text, "y");
  const auto j = to_json(recs[0]);
  for (const char* key : {"request_id", "prompt_hash", "response_text", "latency_ms", "attempt_count"})
    EXPECT_TRUE(j.contains(key)) << key;
  std::filesystem::remove(path);
}

TEST(Match, ExactTitleIsRankOne) {
  const auto c = adaptrec::testing::movie_corpus();
  const auto set = candidates_of(c, {"2", "1", "5"});
  const auto m = match_candidates("Titanic", set, c.catalog);
  EXPECT_TRUE(m.valid);
  EXPECT_EQ(m.ranked_items, (std::vector<ItemId>{"1"}));
}

TEST(Match, NormalizesCaseAndSpace) {
  const auto c = adaptrec::testing::movie_corpus();
  const auto set = candidates_of(c, {"2", "1", "5"});
  const auto m = match_candidates("  the notebook ", set, c.catalog);
  EXPECT_TRUE(m.valid);
  EXPECT_EQ(m.ranked_items, (std::vector<ItemId>{"2"}));
}

TEST(Match, OffListIsInvalid) {
  const auto c = adaptrec::testing::movie_corpus();
  const auto set = candidates_of(c, {"2", "1", "5"});
  const auto m = match_candidates("Inception", set, c.catalog);
  EXPECT_FALSE(m.valid);
  EXPECT_TRUE(m.ranked_items.empty());
  EXPECT_EQ(m.unmatched_text, "Inception");
}

TEST(Match, FencedRankedListWithMarkers) {
  const auto c = adaptrec::testing::movie_corpus();
  const auto set = candidates_of(c, {"2", "1", "5", "20"});
  const auto m = match_candidates(
      "Sure, here you go.\n```ranking\n1. \"Avatar\"\n2) titanic.\n- Se7en (1995)\n[4] Nope\n* Avatar\n```\nBye",
      set, c.catalog);
  EXPECT_TRUE(m.valid);
  EXPECT_EQ(m.ranked_items, (std::vector<ItemId>{"5", "1", "20"}));
  EXPECT_EQ(m.unmatched_text, "[4] Nope");
}

TEST(Match, FirstLineDecidesValidity) {
  const auto c = adaptrec::testing::movie_corpus();
  const auto set = candidates_of(c, {"2", "1"});
  const auto m = match_candidates("I think\nTitanic", set, c.catalog);
  EXPECT_FALSE(m.valid);
  EXPECT_EQ(m.ranked_items, (std::vector<ItemId>{"1"}));
}

TEST(Match, CollidingCandidatesAreRejected) {
  auto c = adaptrec::testing::movie_corpus();
  c.catalog.titles["30"] = "TITANIC!";
  EXPECT_THROW(match_candidates("Titanic", candidates_of(c, {"1", "30"}), c.catalog), Error);
}

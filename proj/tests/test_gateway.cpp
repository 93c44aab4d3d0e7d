#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <thread>

#include <sys/socket.h>

#include "support.hpp"
#include "uprobe/transport.hpp"

using namespace uprobe;
using namespace std::chrono_literals;

namespace {

std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(UPROBE_FIXTURE_DIR) / name; }

MockModelSpec golden_spec() { return load_mock_spec(fixture("golden_spec.json")); }

std::vector<nlohmann::json> transcript() {
    std::ifstream in(fixture("golden_transcript.jsonl"));
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

void expect_matches_transcript(const nlohmann::json& entry, const std::string& got) {
    if (entry.contains("reply")) {
        EXPECT_EQ(got, entry.at("reply").get<std::string>()) << entry.at("request");
        return;
    }
    const auto j = nlohmann::json::parse(got);
    ASSERT_TRUE(j.contains("error")) << got;
    EXPECT_EQ(j.at("id"), entry.at("error_id")) << got;
}

// One end of a socketpair served by serve_stream on a thread.
struct StreamServer {
    int client_fd = -1;
    std::thread worker;

    explicit StreamServer(ModelEndpoint& ep) {
        int sv[2];
        if (::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) != 0) throw std::runtime_error("socketpair");
        client_fd = sv[0];
        worker = std::thread([&ep, fd = sv[1]] {
            serve_stream(ep, fd, fd);
            ::close(fd);
        });
    }
    ~StreamServer() {
        ::shutdown(client_fd, SHUT_RDWR);
        worker.join();
        ::close(client_fd);
    }
};

// Scripted peer: `script(line)` returns the raw text to send back (may be empty).
struct ScriptedPeer {
    std::thread worker;
    int client_fd = -1;

    explicit ScriptedPeer(std::function<std::string(const std::string&)> script) {
        int sv[2];
        if (::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) != 0) throw std::runtime_error("socketpair");
        client_fd = sv[0];
        worker = std::thread([script = std::move(script), fd = sv[1]] {
            LineChannel ch(fd, fd);
            try {
                for (;;) {
                    const auto out = script(ch.recv_line(10s));
                    if (!out.empty()) {
                        const ssize_t n = ::write(fd, out.data(), out.size());
                        (void)n;
                    }
                }
            } catch (const EndpointError&) {
            }
        });
        worker.detach();
    }
};

std::string reply_for(ModelEndpoint& ep, const std::string& request_line) {
    return wire::handle_line(ep, request_line);
}

EndpointInfo golden_info() { return golden_spec().info; }

}  // namespace

TEST(Mock, RulesFirstMatchWins) {
    MockEndpoint ep(golden_spec());
    const std::vector<TokenId> a{2, 5};
    EXPECT_EQ(ep.next_token_distribution(a, 1).top(1).at(0).token, 6u);
    const std::vector<TokenId> b{4, 3, 6, 1, 4, 3};
    EXPECT_EQ(ep.next_token_distribution(b, 1).top(1).at(0).token, 6u);
    const std::vector<TokenId> c{7, 7, 5};
    EXPECT_EQ(ep.next_token_distribution(c, 1).top(1).at(0).token, 6u);
    const std::vector<TokenId> d{7, 7, 2};
    EXPECT_DOUBLE_EQ(ep.next_token_distribution(d, 8).exact_entropy_bits(), 3.0);
}

TEST(Mock, CopyUsesMostRecentEarlierOccurrence) {
    MockEndpoint ep(golden_spec());
    const std::vector<TokenId> t{4, 3, 5, 4, 3, 6, 4, 3};
    EXPECT_EQ(ep.next_token_distribution(t, 1).top(1).at(0).token, 6u);
}

TEST(Mock, VocabularyChecks) {
    MockEndpoint ep(golden_spec());
    const std::vector<TokenId> bad{8};
    EXPECT_THROW(ep.next_token_distribution(bad, 1), EndpointError);
    EXPECT_THROW(ep.next_token_distribution(std::vector<TokenId>{}, 1), ConfigError);
    EXPECT_THROW(ep.next_token_distribution(std::vector<TokenId>{2}, 0), ConfigError);
}

TEST(Mock, SpecRoundTripsThroughJson) {
    const auto spec = golden_spec();
    const auto again = mock_spec_from_json(mock_spec_to_json(spec));
    MockEndpoint a(spec), b(again);
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        std::vector<TokenId> t(1 + rng.below(8));
        for (auto& x : t) x = rng.below(8);
        std::vector<double> s1, s2;
        EXPECT_EQ(a.full_distribution(t, s1), b.full_distribution(t, s2));
    }
}

TEST(Mock, BadSpecsAreConfigErrors) {
    EXPECT_THROW(mock_spec_from_json(nlohmann::json::parse(R"({"vocab_size":0})")), ConfigError);
    EXPECT_THROW(mock_spec_from_json(nlohmann::json::parse(R"({"vocab_size":4,"bos_id":4})")), ConfigError);
    EXPECT_THROW(mock_spec_from_json(nlohmann::json::parse(R"({"vocab_size":4,"default":{"probs":[0.5,0.5]}})")),
                 ConfigError);
    EXPECT_THROW(
        mock_spec_from_json(nlohmann::json::parse(R"({"vocab_size":4,"default":{"probs":[0.5,0.5,0.5,0.5]}})")),
        InvalidDistribution);
    EXPECT_THROW(mock_spec_from_json(nlohmann::json::parse(R"({"vocab_size":4,"rules":[{"copy":true}]})")),
                 ConfigError);
    EXPECT_THROW(load_mock_spec("/nonexistent/spec.json"), IoError);
}

TEST(Wire, GoldenTranscriptInProcess) {
    MockEndpoint ep(golden_spec());
    for (const auto& entry : transcript()) expect_matches_transcript(entry, reply_for(ep, entry.at("request")));
}

TEST(Wire, GoldenTranscriptOverStream) {
    MockEndpoint ep(golden_spec());
    StreamServer server(ep);
    LineChannel ch(::dup(server.client_fd), ::dup(server.client_fd));
    for (const auto& entry : transcript()) {
        ch.send_line(entry.at("request"));
        expect_matches_transcript(entry, ch.recv_line(5s));
    }
}

TEST(Wire, RequestAndReplyCodecs) {
    wire::Request r{42, {1, 2, 3}, 5};
    EXPECT_EQ(wire::encode_request(r), R"({"id":42,"tokens":[1,2,3],"top_k":5})");
    const auto back = wire::decode_request(wire::encode_request(r));
    EXPECT_EQ(back.id, 42u);
    EXPECT_EQ(back.tokens, r.tokens);
    const auto rep = wire::decode_reply(R"({"id":3,"top":[[2,0.5]],"entropy_bits":1.5,"tail_mass":0.5})");
    EXPECT_EQ(rep.id, 3u);
    ASSERT_TRUE(rep.dist);
    EXPECT_EQ(rep.dist->exact_entropy_bits(), 1.5);
    const auto err = wire::decode_reply(R"({"id":3,"error":"boom"})");
    EXPECT_EQ(*err.error, "boom");
}

TEST(Wire, BadRepliesAreTyped) {
    auto reason = [](const std::string& line) {
        try {
            wire::decode_reply(line);
        } catch (const EndpointError& e) {
            return e.reason();
        }
        return EndpointError::Reason::transport;
    };
    EXPECT_EQ(reason("{"), EndpointError::Reason::malformed_reply);
    EXPECT_EQ(reason(R"({"id":1,"top":[[2,0.5]]})"), EndpointError::Reason::malformed_reply);
    EXPECT_EQ(reason(R"({"id":1,"top":[[2,0.5]],"entropy_bits":1.5,"tail_mass":0.1})"),
              EndpointError::Reason::inconsistent_reply);
    EXPECT_EQ(reason(R"({"id":1,"top":[[2,0.5],[3,0.5]],"entropy_bits":0.2,"tail_mass":0.0})"),
              EndpointError::Reason::inconsistent_reply);
}

TEST(Wire, FuzzedRequestsNeverCrashAndConnectionSurvives) {
    MockEndpoint ep(golden_spec());
    StreamServer server(ep);
    LineChannel ch(::dup(server.client_fd), ::dup(server.client_fd));
    const std::vector<std::string> seeds = {R"({"id":1,"tokens":[2,5],"top_k":3})",
                                            R"({"id":2,"tokens":[4,3,7,2,4,3],"top_k":1})",
                                            R"({"top_k":2,"tokens":[3],"id":5})"};
    Rng rng(2024);
    for (int i = 0; i < 1000; ++i) {
        std::string s = seeds[rng.below(seeds.size())];
        const int edits = 1 + static_cast<int>(rng.below(4));
        for (int e = 0; e < edits && !s.empty(); ++e) {
            const auto pos = rng.below(s.size());
            switch (rng.below(5)) {
                case 0: s[pos] = static_cast<char>(rng.below(256)); break;
                case 1: s.erase(pos, 1); break;
                case 2: s.insert(pos, 1, static_cast<char>(rng.below(256))); break;
                case 3: s.resize(pos); break;
                default: s.insert(pos, s.substr(rng.below(s.size()), 1 + rng.below(8))); break;
            }
        }
        for (auto& c : s) {
            if (c == '\n' || c == '\r') c = ' ';
        }
        if (s.find_first_not_of(' ') == std::string::npos) s = "x";
        ch.send_line(s);
        const auto reply = ch.recv_line(5s);
        const auto j = nlohmann::json::parse(reply);
        ASSERT_TRUE(j.contains("error") || j.contains("top")) << reply;
    }
    ch.send_line(R"({"id":99,"tokens":[2],"top_k":2})");
    EXPECT_EQ(ch.recv_line(5s), R"({"id":99,"top":[[2,0.5],[3,0.25]],"entropy_bits":1.5,"tail_mass":0.25})");
}

TEST(Transport, TcpMatchesInProcess) {
    MockEndpoint local(golden_spec());
    auto server = SocketServer::tcp("127.0.0.1", 0);
    std::atomic<bool> stop{false};
    std::thread t([&] { server.run(local, stop); });
    {
        auto remote = open_endpoint("tcp:127.0.0.1:" + std::to_string(server.port()), golden_info(), 5000ms);
        Rng rng(5);
        for (int i = 0; i < 100; ++i) {
            std::vector<TokenId> toks(1 + rng.below(6));
            for (auto& x : toks) x = rng.below(8);
            const auto a = remote->next_token_distribution(toks, 3);
            const auto b = local.next_token_distribution(toks, 3);
            ASSERT_EQ(a.top_entries(), b.top_entries());
            ASSERT_EQ(a.exact_entropy_bits(), b.exact_entropy_bits());
        }
    }
    stop = true;
    t.join();
}

TEST(Transport, UnixSocket) {
    MockEndpoint local(golden_spec());
    const auto path = (support::temp_dir("unix") / "s.sock").string();
    auto server = SocketServer::unix_socket(path);
    std::atomic<bool> stop{false};
    std::thread t([&] { server.run(local, stop, 1); });
    {
        auto remote = open_endpoint("unix:" + path, golden_info(), 5000ms);
        const std::vector<TokenId> toks{2, 5};
        EXPECT_EQ(remote->next_token_distribution(toks, 1).top(1).at(0).token, 6u);
    }
    t.join();
}

TEST(Transport, StdioSubprocess) {
    const std::string cmd =
        std::string(UPROBE_CLI_PATH) + " serve-mock --stdio --spec " + fixture("golden_spec.json").string();
    auto remote = open_endpoint("stdio:" + cmd, golden_info(), 10000ms);
    const std::vector<TokenId> toks{4, 3, 7, 2, 4, 3};
    EXPECT_EQ(remote->next_token_distribution(toks, 1).top(1).at(0).token, 7u);
    const std::vector<TokenId> plain{2};
    EXPECT_DOUBLE_EQ(remote->next_token_distribution(plain, 2).exact_entropy_bits(), 1.5);
}

TEST(Transport, EnvironmentFallbackAndAddressErrors) {
    ::setenv(kEndpointEnv, ("mock:" + fixture("golden_spec.json").string()).c_str(), 1);
    auto ep = open_endpoint("", std::nullopt);
    EXPECT_EQ(ep->vocab_size(), 8u);
    ::unsetenv(kEndpointEnv);
    EXPECT_THROW(open_endpoint("", std::nullopt), ConfigError);
    EXPECT_THROW(open_endpoint("tcp:localhost:9", std::nullopt), ConfigError);
    EXPECT_THROW(parse_endpoint_address("tcp:hostonly"), ConfigError);
    EXPECT_THROW(parse_endpoint_address("tcp:h:notaport"), ConfigError);
    EXPECT_EQ(parse_endpoint_address("localhost:9000").port, "9000");
    EXPECT_EQ(parse_endpoint_address("unix:/tmp/x").kind, EndpointAddress::Kind::unix_socket);
}

TEST(Transport, ConnectionRefusedIsTransportError) {
    auto server = SocketServer::tcp("127.0.0.1", 0);
    const auto port = server.port();
    server.close();
    auto remote = open_endpoint("tcp:127.0.0.1:" + std::to_string(port), golden_info(), 1000ms);
    try {
        remote->next_token_distribution(std::vector<TokenId>{2}, 1);
        FAIL();
    } catch (const EndpointError& e) {
        EXPECT_EQ(e.reason(), EndpointError::Reason::transport);
    }
}

TEST(Transport, TimeoutReconnectsAndRetriesOnce) {
    MockEndpoint local(golden_spec());
    int connects = 0;
    std::vector<std::unique_ptr<ScriptedPeer>> peers;
    Connector c = [&] {
        ++connects;
        if (connects == 1) {
            // Swallows every request.
            peers.push_back(std::make_unique<ScriptedPeer>([](const std::string&) { return std::string(); }));
        } else {
            peers.push_back(std::make_unique<ScriptedPeer>(
                [&local](const std::string& line) { return wire::handle_line(local, line) + "\n"; }));
        }
        return std::make_unique<LineChannel>(peers.back()->client_fd, peers.back()->client_fd);
    };
    RemoteEndpoint ep(c, golden_info(), 200ms);
    const auto d = ep.next_token_distribution(std::vector<TokenId>{2}, 1);
    EXPECT_EQ(d.top(1).at(0).token, 2u);
    EXPECT_EQ(connects, 2);
    EXPECT_EQ(ep.requests_sent(), 2u);
}

TEST(Transport, SecondTimeoutPropagates) {
    std::vector<std::unique_ptr<ScriptedPeer>> peers;
    Connector c = [&] {
        peers.push_back(std::make_unique<ScriptedPeer>([](const std::string&) { return std::string(); }));
        return std::make_unique<LineChannel>(peers.back()->client_fd, peers.back()->client_fd);
    };
    RemoteEndpoint ep(c, golden_info(), 100ms);
    try {
        ep.next_token_distribution(std::vector<TokenId>{2}, 1);
        FAIL();
    } catch (const EndpointError& e) {
        EXPECT_EQ(e.reason(), EndpointError::Reason::timeout);
    }
}

TEST(Transport, StaleRepliesAreSkippedNewerAreRejected) {
    MockEndpoint local(golden_spec());
    std::unique_ptr<ScriptedPeer> peer;
    // Every reply is preceded by a stale copy of the previous one.
    std::string previous;
    Connector c = [&] {
        peer = std::make_unique<ScriptedPeer>([&](const std::string& line) {
            std::string out = previous.empty() ? "" : previous + "\n";
            previous = wire::handle_line(local, line);
            return out + previous + "\n";
        });
        return std::make_unique<LineChannel>(peer->client_fd, peer->client_fd);
    };
    RemoteEndpoint ep(c, golden_info(), 2000ms);
    for (int i = 0; i < 5; ++i) {
        EXPECT_EQ(ep.next_token_distribution(std::vector<TokenId>{2, 5}, 1).top(1).at(0).token, 6u);
    }

    std::unique_ptr<ScriptedPeer> liar;
    Connector c2 = [&] {
        liar = std::make_unique<ScriptedPeer>([](const std::string&) {
            return std::string(R"({"id":77,"top":[[2,1.0]],"entropy_bits":0.0,"tail_mass":0.0})") + "\n";
        });
        return std::make_unique<LineChannel>(liar->client_fd, liar->client_fd);
    };
    RemoteEndpoint bad(c2, golden_info(), 2000ms);
    try {
        bad.next_token_distribution(std::vector<TokenId>{2}, 1);
        FAIL();
    } catch (const EndpointError& e) {
        EXPECT_EQ(e.reason(), EndpointError::Reason::malformed_reply);
    }
}

TEST(Transport, ServerErrorsAndOversizedRepliesAreTyped) {
    std::unique_ptr<ScriptedPeer> peer;
    int calls = 0;
    Connector c = [&] {
        peer = std::make_unique<ScriptedPeer>([&](const std::string& line) {
            const auto id = nlohmann::json::parse(line).at("id").get<std::uint64_t>();
            ++calls;
            if (calls == 1) return wire::encode_error(id, "model exploded") + "\n";
            return "{\"id\":" + std::to_string(id) +
                   R"(,"top":[[2,0.5],[3,0.5]],"entropy_bits":1.0,"tail_mass":0.0})" + "\n";
        });
        return std::make_unique<LineChannel>(peer->client_fd, peer->client_fd);
    };
    RemoteEndpoint ep(c, golden_info(), 2000ms);
    auto reason = [&] {
        try {
            ep.next_token_distribution(std::vector<TokenId>{2}, 1);
        } catch (const EndpointError& e) {
            return e.reason();
        }
        return EndpointError::Reason::transport;
    };
    EXPECT_EQ(reason(), EndpointError::Reason::server_error);
    EXPECT_EQ(reason(), EndpointError::Reason::inconsistent_reply);
}

TEST(Transport, ReplyTokenOutsideVocabulary) {
    std::unique_ptr<ScriptedPeer> peer;
    Connector c = [&] {
        peer = std::make_unique<ScriptedPeer>([](const std::string& line) {
            const auto id = nlohmann::json::parse(line).at("id").get<std::uint64_t>();
            return "{\"id\":" + std::to_string(id) + R"(,"top":[[50,1.0]],"entropy_bits":0.0,"tail_mass":0.0})" +
                   "\n";
        });
        return std::make_unique<LineChannel>(peer->client_fd, peer->client_fd);
    };
    RemoteEndpoint ep(c, golden_info(), 2000ms);
    try {
        ep.next_token_distribution(std::vector<TokenId>{2}, 1);
        FAIL();
    } catch (const EndpointError& e) {
        EXPECT_EQ(e.reason(), EndpointError::Reason::vocab_mismatch);
    }
}

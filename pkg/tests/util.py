import asyncio


def run(coro, timeout: float = 120.0):
    """Run a coroutine to completion on a fresh loop, with a hard timeout."""
    return asyncio.run(asyncio.wait_for(coro, timeout))


async def wait_for_condition(pred, timeout: float = 5.0, step: float = 0.01):
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    while not pred():
        if loop.time() > deadline:
            raise AssertionError("condition not reached in time")
        await asyncio.sleep(step)


# acceptance verdicts, printed in the terminal summary by conftest
CRITERIA: list[str] = []


def criterion(name: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    CRITERIA.append(line)
    print(line)
    return ok

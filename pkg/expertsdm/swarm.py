import asyncio
import functools
import logging
from concurrent.futures import ThreadPoolExecutor

seq = 0

class Swarm:
    """Pool of asyncio workers, each running its CPU-bound tasks on a thread."""

    def __init__(self, max_workers, name=None):
        global seq
        seq += 1
        self.name = name or f"swarm{seq}"
        self.queue = None
        self.max_workers = max(1, int(max_workers))
        self.task_seq = 0

    def _ensure_queue(self):
        # queues must be created inside the running loop
        if self.queue is None:
            self.queue = asyncio.Queue()
        return self.queue

    async def run_while(self, task):
        logging.debug(f"Swarm {self.name} running with {self.max_workers} workers")
        self._ensure_queue()

        r = None
        ex = None

        async def wrapper():
            nonlocal r, ex
            try:
                r = await task
            except Exception as ex1:
                logging.debug(f"Swarm {self.name} concurrent task failed, exception: {ex1}")
                ex = ex1
            await self.terminate()

        with ThreadPoolExecutor(max_workers=self.max_workers,
                                thread_name_prefix=self.name) as executor:
            workers = [self._worker(ix, executor) for ix in range(self.max_workers)]
            await asyncio.gather(wrapper(), *workers)

        if ex:
            logging.debug(f"Swarm {self.name} rethrowing exception {ex}")
            raise ex
        logging.debug(f"Swarm {self.name} run_while done")
        return r

    def loop_until_complete(self, task_factory):
        """Run the coroutine built by task_factory() on a fresh event loop."""
        async def main():
            return await self.run_while(task_factory())
        r = asyncio.run(main())
        self.queue = None
        logging.debug(f"Swarm {self.name} loop_until_complete done")
        return r

    def run_keyed(self, task, keys, on_response, update_cb=None, key_arg="key"):
        """Runs task(**{key_arg: k}) for every key on the workers.

        on_response(key, value, error) is called in completion order on
        the event loop thread, and update_cb(done, total) after each one.
        Exceptions raised by on_response abort the run.
        """
        keys = list(keys)

        async def drive():
            responses = asyncio.Queue()

            async def feed():
                for key in keys:
                    await self.put(task, task_key=key, response_queue=responses, **{key_arg: key})

            feeder = asyncio.create_task(feed())
            for done in range(1, len(keys) + 1):
                on_response(*(await responses.get()))
                if update_cb:
                    update_cb(done, len(keys))
            await feeder

        return self.loop_until_complete(drive)

    async def terminate(self):
        logging.debug(f"Swarm {self.name} terminating")
        for ix in range(self.max_workers):
            await self.put(None, task_key=None)

    async def _worker(self, ix, executor):
        logging.debug(f"Worker {ix} started")
        loop = asyncio.get_running_loop()
        while True:
            logging.debug(f"Swarm {self.name}/{ix} waiting for tasks")
            (task_key, cb, response_queue, kwargs) = await self.queue.get()
            if cb is None:
                logging.debug(f"Swarm {self.name}/{ix} terminating")
                return
            try:
                logging.debug(f"Swarm {self.name}/{ix} starting task {task_key}")
                value = await loop.run_in_executor(executor, functools.partial(cb, **kwargs))
                res = (task_key, value, None)
            except Exception as ex:
                logging.debug(f"Swarm {self.name}/{ix} running task {task_key} failed with exception {ex}",
                              exc_info=True)
                res = (task_key, None, ex)

            logging.debug(f"Swarm {self.name}/{ix} ended task {task_key}")
            if response_queue:
                await response_queue.put(res)
                logging.debug(f"Swarm {self.name}/{ix} queued response for task {task_key}")

    async def put(self, task, task_key=None, response_queue=None, **kwargs):
        if task_key is None and task is not None:
            task_key = self.task_seq
            self.task_seq += 1
        logging.debug(f"Swarm {self.name} queueing task {task and task.__name__} with key {task_key}")
        return await self._ensure_queue().put((task_key, task, response_queue, kwargs))

    @staticmethod
    def unwrap_response(res):
        (_, value, ex) = res
        if ex is not None:
            logging.debug(f"Rethrowing exception received from Swarm: {ex}")
            raise ex
        return value

"""Reference single-queue matcher.

Independent model of envelope matching used to check the runtime's
queues: posted receives match the oldest compatible unexpected arrival;
arrivals match the oldest compatible posted receive; ties broken by
list order (posted-order priority).  Nothing here touches minimpi
internals; the tests drive this model and the real VCI with the same
script and compare the resulting (receive, message) pairings.

Envelope and pattern are 5-tuples (context, source, tag, src_idx,
dst_idx); -1 in a pattern's source/tag/src_idx slot is a wildcard,
context and dst_idx always match exactly.
"""

ANY = -1


def matches(pattern, env):
    if pattern[0] != env[0]:
        return False
    if pattern[4] != env[4]:
        return False
    for slot in (1, 2, 3):
        if pattern[slot] != ANY and pattern[slot] != env[slot]:
            return False
    return True


class ModelVci:
    """The matching model: two ordered queues and a pairing log."""

    def __init__(self):
        self.posted = []       # (recv_name, pattern)
        self.unexpected = []   # (msg_id, env)
        self.log = []          # (recv_name, msg_id) in completion order

    def post(self, recv_name, pattern):
        for i, (msg_id, env) in enumerate(self.unexpected):
            if matches(pattern, env):
                del self.unexpected[i]
                self.log.append((recv_name, msg_id))
                return
        self.posted.append((recv_name, pattern))

    def arrive(self, msg_id, env):
        for i, (recv_name, pattern) in enumerate(self.posted):
            if matches(pattern, env):
                del self.posted[i]
                self.log.append((recv_name, msg_id))
                return
        self.unexpected.append((msg_id, env))

import numpy as np
import pytest

from relcell import relational_store as rs

# one line per acceptance criterion, printed after the run; populated by
# tests/test_acceptance.py
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

USERS_ORDERS_SCHEMA = """\
# two-table fixture
table users
  user_id pk
  signup_at datetime timestamp
  age numeric
  premium boolean

table orders
  order_id pk
  user_id fk -> users
  placed_at datetime timestamp
  price numeric
  qty numeric

task churn
  entity user_id -> users
  timestamp cutoff_at
  label churned boolean
  split train <= 2024-02-16T00:00:00
  split val <= 2024-02-24T00:00:00
"""

T0 = rs.parse_datetime("2024-01-01T00:00:00")
DAY = 86400.0


def users_orders_rows():
    users = [
        {"user_id": "u1", "signup_at": T0, "age": 30.0, "premium": True},
        {"user_id": "u2", "signup_at": T0 + DAY, "age": 40.0, "premium": False},
        {"user_id": "u3", "signup_at": T0 + 2 * DAY, "age": 50.0},  # premium missing
    ]
    orders = [
        {"order_id": "o1", "user_id": "u1", "placed_at": T0 + 3 * DAY, "price": 10.0, "qty": 1.0},
        {"order_id": "o2", "user_id": "u1", "placed_at": T0 + 5 * DAY, "price": 20.0, "qty": 2.0},
        {"order_id": "o3", "user_id": "u2", "placed_at": T0 + 7 * DAY, "price": 30.0, "qty": 1.0},
        {"order_id": "o4", "user_id": "u2", "placed_at": T0 + 40 * DAY, "price": 40.0, "qty": 3.0},
        {"order_id": "o5", "user_id": "u3", "placed_at": T0 + 90 * DAY, "price": 50.0, "qty": 2.0},
    ]
    return {"users": users, "orders": orders}


@pytest.fixture
def users_orders_db():
    schema = rs.parse_schema(USERS_ORDERS_SCHEMA)
    return rs.RelationalDatabase.from_rows(schema, users_orders_rows())


@pytest.fixture
def churn_task(users_orders_db):
    spec = users_orders_db.schema.task("churn")
    # 10 train / 2 val / 2 test rows over the three users
    n = 14
    ent = np.array([i % 3 for i in range(n)], dtype=np.int64)
    ts = np.array(
        [T0 + 10 * DAY + i * 4 * DAY for i in range(n)], dtype=np.float64
    )  # rows 0..9 train (<= Mar 1), 10..11 val, 12..13 test
    labels = np.array([i % 2 for i in range(n)], dtype=np.float64)
    return rs.TaskTable(spec, ent, ts, labels)


@pytest.fixture
def users_orders_files(tmp_path):
    (tmp_path / "schema.txt").write_text(USERS_ORDERS_SCHEMA)
    (tmp_path / "users.csv").write_text(
        "user_id,signup_at,age,premium\n"
        "u1,2024-01-01T00:00:00,30,true\n"
        "u2,2024-01-02T00:00:00,40,false\n"
        "u3,2024-01-03T00:00:00,50,\n"
    )
    (tmp_path / "orders.csv").write_text(
        "order_id,user_id,placed_at,price,qty\n"
        "o1,u1,2024-01-04T00:00:00,10,1\n"
        "o2,u1,2024-01-06T00:00:00,20,2\n"
        "o3,u2,2024-01-08T00:00:00,30,1\n"
        "o4,u2,2024-02-10T00:00:00,40,3\n"
        "o5,u3,2024-03-31T00:00:00,50,2\n"
    )
    (tmp_path / "churn.csv").write_text(
        "user_id,cutoff_at,churned\n"
        + "".join(
            f"u{(i % 3) + 1},{rs.format_datetime(T0 + 10 * DAY + i * 4 * DAY)},{i % 2}\n"
            for i in range(14)
        )
    )
    return tmp_path

ACCOUNTS = {"Mary Brown": [{"name": "Current", "number": "11-22-33 12345678", "balance": 1250.0},
                           {"name": "Savings", "number": "11-22-33 87654321", "balance": 5400.0}]}
PAYEES = {"Mary Brown": ["John Smith", "Acme Utilities"]}


def ok(msg, *extra):
    return [{"status": "success", "msg": msg}, *extra]


def action_session_start(username: str):
    """Load the customer profile at the start of a session."""
    return ok("profile loaded",
              {"arg": "segment", "value": "premier"},
              {"arg": "email_address", "value": "mary.brown@example.com"},
              {"arg": "physical_address", "value": "12 High St, London"})


def action_ask_account_from(username: str):
    """Show the accounts a transfer can be made from."""
    for acc in ACCOUNTS.get(username, []):
        print(f"{acc['name']}: {acc['balance']:.2f}")
    return ok("accounts listed")


def action_ask_account(username: str):
    """Show the user's accounts."""
    return action_ask_account_from(username)


def action_check_balance(username: str, account: str):
    """Balance of one account."""
    for acc in ACCOUNTS.get(username, []):
        if acc["number"] == account:
            return ok("balance found", {"bot": f"Your balance is {acc['balance']:.2f}."})
    return [{"status": "error", "msg": "no such account"}]


def action_check_payee_existence(username: str, payee_name: str):
    """Whether a payee is authorised."""
    return ok("payee checked", {"arg": "payee_exists", "value": payee_name in PAYEES.get(username, [])})


def action_check_sufficient_funds(account_from: str, amount: float):
    """Whether the source account covers the amount."""
    return ok("funds checked", {"arg": "sufficient", "value": amount <= 1250.0})


def action_process_immediate_payment(account_from: str, payee_name: str, amount: float):
    """Send a payment now."""
    return ok("payment sent")


def action_validate_payment_date(payment_date: str):
    """Check a DD/MM/YYYY date lies in the future."""
    return ok("date valid", {"arg": "valid", "value": True})


def action_schedule_payment(account_from: str, payee_name: str, amount: float, payment_date: str):
    """Schedule a future payment."""
    return ok("payment scheduled")


def action_add_payee(username: str, payee_name: str, account_number: str, payee_type: str, reference: str = ""):
    """Authorise a new payee."""
    PAYEES.setdefault(username, []).append(payee_name)
    return ok("payee added")


def action_remove_payee(username: str, payee_name: str):
    """Remove an authorised payee."""
    return ok("payee removed")


def action_list_payees(username: str):
    """List authorised payees."""
    return ok("payees listed", {"bot": ", ".join(PAYEES.get(username, []))})


def action_update_card_status(reason_for_blocking: str = ""):
    """Record the card block."""
    return ok("card blocked")

import datetime


def get_date():
    """Today's date in ISO format."""
    return [{"status": "success", "msg": "date retrieved"},
            {"arg": "today", "value": datetime.date.today().isoformat()}]


def query_book_genre(book: str):
    """Look up the genre of a book by title."""
    print(f"genre lookup for {book}")
    return [{"status": "success", "msg": "genre found"},
            {"arg": "genre", "value": "science fiction"}]


def find_bestsellers(genre: str, limit: int = 3):
    """Best-selling books of a genre."""
    titles = ["Dune", "Foundation", "Hyperion"][:limit]
    print(f"Top sellers in {genre}: {', '.join(titles)}.")
    return [{"status": "success", "msg": "bestsellers listed"},
            {"arg": "books", "value": titles}]


def place_order(ordered_book: list, date: str):
    """Place an order for the selected books."""
    return [{"status": "success", "msg": "order 1001 created"},
            {"bot": "Your order has been placed."},
            {"arg": "status", "value": True}]
